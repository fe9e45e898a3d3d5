#pragma once

#include "voxlift/common.hpp"
#include "voxlift/geometry.hpp"

namespace voxlift {

enum class Activation { kRelu };

/// Two-layer MLP: act(x . w1 + b1) . w2 + b2, row-vector convention.
struct MlpWeights {
    Matrix w1;  // d_in x d_hidden
    std::vector<double> b1;
    Matrix w2;  // d_hidden x d_out
    std::vector<double> b2;
    Activation activation = Activation::kRelu;

    std::size_t in_dim() const { return w1.rows(); }
    std::size_t hidden_dim() const { return w1.cols(); }
    std::size_t out_dim() const { return w2.cols(); }

    void validate() const {
        if (w1.cols() != w2.rows() || b1.size() != w1.cols() || b2.size() != w2.cols())
            throw std::invalid_argument("MlpWeights: inconsistent shapes");
        for (double v : w1.data())
            if (!std::isfinite(v)) throw std::invalid_argument("MlpWeights: non-finite entry");
        for (double v : w2.data())
            if (!std::isfinite(v)) throw std::invalid_argument("MlpWeights: non-finite entry");
        for (double v : b1)
            if (!std::isfinite(v)) throw std::invalid_argument("MlpWeights: non-finite entry");
        for (double v : b2)
            if (!std::isfinite(v)) throw std::invalid_argument("MlpWeights: non-finite entry");
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer.
    static MlpWeights init(std::size_t d_in, std::size_t d_hidden, std::size_t d_out, Rng& rng) {
        MlpWeights m;
        m.w1 = Matrix(d_in, d_hidden);
        m.b1.resize(d_hidden);
        m.w2 = Matrix(d_hidden, d_out);
        m.b2.resize(d_out);
        const double s1 = 1.0 / std::sqrt(static_cast<double>(d_in));
        for (double& v : m.w1.data()) v = rng.uniform(-s1, s1);
        for (double& v : m.b1) v = rng.uniform(-s1, s1);
        const double s2 = 1.0 / std::sqrt(static_cast<double>(d_hidden));
        for (double& v : m.w2.data()) v = rng.uniform(-s2, s2);
        for (double& v : m.b2) v = rng.uniform(-s2, s2);
        return m;
    }

    /// out = act(x . w1 + b1) . w2 + b2 for a single row x (len in_dim)
    void forward_row(const double* x, double* out, double* hidden_scratch) const {
        matvec_row(x, w1, hidden_scratch);
        for (std::size_t h = 0; h < b1.size(); ++h) {
            double a = hidden_scratch[h] + b1[h];
            hidden_scratch[h] = a > 0.0 ? a : 0.0;  // relu
        }
        matvec_row(hidden_scratch, w2, out);
        for (std::size_t c = 0; c < b2.size(); ++c) out[c] += b2[c];
    }
};

/// Row-wise MLP encoding of n x 3 positions into n x d embeddings.
inline Matrix pos_encode(const MlpWeights& mlp, const Matrix& positions, int threads = 1) {
    if (mlp.in_dim() != 3 || positions.cols() != 3)
        throw std::invalid_argument("pos_encode: expects 3-d inputs");
    mlp.validate();
    Matrix out(positions.rows(), mlp.out_dim());
    parallel_for(positions.rows(), threads, [&](std::size_t b, std::size_t e) {
        std::vector<double> hidden(mlp.hidden_dim());
        for (std::size_t i = b; i < e; ++i) mlp.forward_row(positions.row(i), out.row(i), hidden.data());
    });
    return out;
}

/// Elementwise feature + position-embedding sum; masked tokens are dropped
/// upstream, both inputs are dense here.
inline Matrix make_3d_patches(const Matrix& features, const Matrix& pos_embeddings) {
    if (features.rows() != pos_embeddings.rows() || features.cols() != pos_embeddings.cols())
        throw std::invalid_argument("make_3d_patches: shape mismatch");
    Matrix out = features;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += pos_embeddings.data()[i];
    return out;
}

struct CoordinateToken {
    std::vector<double> embedding;
    Vec3 coordinate{0, 0, 0};
};

/// Encode a bare 3D coordinate with the same MLP used for patch positions.
inline CoordinateToken encode_coordinate_token(const MlpWeights& mlp, const Vec3& xyz) {
    if (!is_finite(xyz)) throw std::invalid_argument("encode_coordinate_token: non-finite input");
    Matrix one(1, 3);
    one.set_row3(0, xyz);
    const Matrix emb = pos_encode(mlp, one);
    CoordinateToken tok;
    tok.coordinate = xyz;
    tok.embedding.assign(emb.row(0), emb.row(0) + emb.cols());
    return tok;
}

struct PatchSource {
    std::uint32_t view = 0;
    std::uint32_t row = 0;  // patch row (j)
    std::uint32_t col = 0;  // patch col (i)
};

/// The lifted scene: per-token feature vector, world position, provenance.
/// Only tokens with valid depth survive the lift.
struct Patch3DSet {
    Matrix features;   // n x d
    Matrix positions;  // n x 3
    std::vector<PatchSource> source;

    std::size_t size() const { return positions.rows(); }
};

/// Full per-scene lift: backproject every view's patch grid, drop masked
/// tokens, and add position embeddings to the surviving feature rows.
/// Token order is (view, patch row, patch col).
inline Patch3DSet lift_scene(const std::vector<CameraView>& views, const MlpWeights& mlp,
                             int threads = 1) {
    std::size_t feature_dim = mlp.out_dim();
    for (const CameraView& v : views) {
        if (v.feature_dim != 0 && v.feature_dim != feature_dim)
            throw std::invalid_argument("lift_scene: view feature_dim does not match MLP output dim");
    }

    std::vector<Vec3> positions;
    std::vector<PatchSource> source;
    std::vector<float> raw_features;

    for (std::size_t vi = 0; vi < views.size(); ++vi) {
        const CameraView& view = views[vi];
        const auto [gw, gh] = view.grid_dims();
        const PositionField field = backproject_patch_centers(view, view.patch, threads);
        for (int j = 0; j < gh; ++j) {
            for (int i = 0; i < gw; ++i) {
                const std::size_t idx = static_cast<std::size_t>(j) * gw + i;
                if (!field.validity[idx]) continue;
                positions.push_back(field.positions[idx]);
                source.push_back({static_cast<std::uint32_t>(vi), static_cast<std::uint32_t>(j),
                                  static_cast<std::uint32_t>(i)});
                if (view.feature_dim > 0) {
                    const float* f = view.features.data() + idx * view.feature_dim;
                    raw_features.insert(raw_features.end(), f, f + view.feature_dim);
                } else {
                    raw_features.insert(raw_features.end(), feature_dim, 0.0f);
                }
            }
        }
    }

    Patch3DSet out;
    out.positions = Matrix::from_rows(positions);
    out.source = std::move(source);
    Matrix feats(positions.size(), feature_dim);
    for (std::size_t i = 0; i < feats.size(); ++i) feats.data()[i] = raw_features[i];
    const Matrix emb = pos_encode(mlp, out.positions, threads);
    out.features = make_3d_patches(feats, emb);
    return out;
}

}  // namespace voxlift
