#pragma once

#include "voxlift/lift.hpp"
#include "voxlift/pooling.hpp"
#include "voxlift/spatial.hpp"

namespace voxlift {

struct DecoderConfig {
    std::size_t layers = 4;
    std::size_t queries = 512;
    std::vector<std::size_t> knn_schedule{16, 32, 64, 128};
    std::size_t dim = 64;
    double selection_threshold = 0.5;
    bool multi_target = false;

    void validate() const {
        if (knn_schedule.size() != layers)
            throw std::invalid_argument("DecoderConfig: knn_schedule length must equal layer count");
        for (std::size_t k : knn_schedule)
            if (k < 1) throw std::invalid_argument("DecoderConfig: every k must be >= 1");
        if (queries < 1 || dim < 1) throw std::invalid_argument("DecoderConfig: queries and dim must be >= 1");
        if (!(selection_threshold >= 0.0 && selection_threshold <= 1.0))
            throw std::invalid_argument("DecoderConfig: selection_threshold must lie in [0,1]");
    }
};

struct AttentionWeights {
    Matrix wq, wk, wv, wo;  // each dim x dim
};

/// All learnable tensors of the grounding decoder. One q/k/v/out set per
/// layer serves both the cross- and the self-attention of that layer; the
/// relative-PE MLP, sigma head, query position MLP and box head are shared
/// across layers.
struct DecoderWeights {
    std::vector<AttentionWeights> layers;
    MlpWeights rel_pe_mlp;     // 3 -> dim
    std::vector<double> sigma_w;  // dim
    double sigma_b = 0.0;
    MlpWeights query_pos_mlp;  // 3 -> dim
    MlpWeights box_head;       // dim -> 6

    // a config may use a prefix of the stored layers (e.g. layers = 0)
    void validate(const DecoderConfig& cfg) const {
        if (layers.size() < cfg.layers) throw std::invalid_argument("DecoderWeights: layer count mismatch");
        for (const AttentionWeights& aw : layers) {
            for (const Matrix* m : {&aw.wq, &aw.wk, &aw.wv, &aw.wo})
                if (m->rows() != cfg.dim || m->cols() != cfg.dim)
                    throw std::invalid_argument("DecoderWeights: projection shape mismatch");
        }
        if (rel_pe_mlp.in_dim() != 3 || rel_pe_mlp.out_dim() != cfg.dim)
            throw std::invalid_argument("DecoderWeights: rel_pe_mlp shape mismatch");
        if (query_pos_mlp.in_dim() != 3 || query_pos_mlp.out_dim() != cfg.dim)
            throw std::invalid_argument("DecoderWeights: query_pos_mlp shape mismatch");
        if (box_head.in_dim() != cfg.dim || box_head.out_dim() != 6)
            throw std::invalid_argument("DecoderWeights: box_head shape mismatch");
        if (sigma_w.size() != cfg.dim) throw std::invalid_argument("DecoderWeights: sigma head shape mismatch");
    }

    static DecoderWeights init(const DecoderConfig& cfg, Rng& rng) {
        DecoderWeights w;
        w.query_pos_mlp = MlpWeights::init(3, cfg.dim, cfg.dim, rng);
        w.rel_pe_mlp = MlpWeights::init(3, cfg.dim, cfg.dim, rng);
        const double s = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
        w.sigma_w.resize(cfg.dim);
        for (double& v : w.sigma_w) v = rng.uniform(-s, s);
        w.sigma_b = rng.uniform(-s, s);
        w.box_head = MlpWeights::init(cfg.dim, cfg.dim, 6, rng);
        w.layers.resize(cfg.layers);
        for (AttentionWeights& aw : w.layers) {
            for (Matrix* m : {&aw.wq, &aw.wk, &aw.wv, &aw.wo}) {
                *m = Matrix(cfg.dim, cfg.dim);
                for (double& v : m->data()) v = rng.uniform(-s, s);
            }
        }
        return w;
    }
};

/// Instance queries: zero-initialized values anchored at FPS-sampled 3D
/// positions, with a learnable positional encoding of those coordinates.
struct QueryState {
    Matrix values;     // N x dim
    Matrix positions;  // N x 3
    Matrix pos_enc;    // N x dim
};

struct LocationToken {
    std::vector<double> embedding;
};

inline QueryState init_queries(const Matrix& patch_positions, const DecoderConfig& cfg,
                               const DecoderWeights& weights, int threads = 1) {
    const std::size_t m = patch_positions.rows();
    if (m == 0) throw std::invalid_argument("init_queries: empty patches");
    const std::size_t n = std::min<std::size_t>(cfg.queries, m);
    const std::vector<std::uint32_t> picks = fps(patch_positions, n, 0);

    QueryState state;
    state.values = Matrix(n, cfg.dim);
    state.positions = Matrix(n, 3);
    for (std::size_t i = 0; i < n; ++i) state.positions.set_row3(i, patch_positions.row3(picks[i]));
    state.pos_enc = pos_encode(weights.query_pos_mlp, state.positions, threads);
    return state;
}

/// One cross-attention sublayer. Query i attends to its k nearest patches;
/// the relative position encoding pe_ij = rel_pe_mlp(p_j - p_i) is added to
/// both the projected query and the projected key before the dot product:
///   logit_ij = (Wq(v_i + pos_enc_i) + pe_ij) . (Wk f_j + pe_ij) / sqrt(C)
///   v_i += Wo( sum_j softmax(logit)_ij  Wv f_j )
/// attn_out (optional) receives the softmax rows, one per query.
inline void knn_cross_attention(QueryState& state, const Matrix& patch_features,
                                const Matrix& patch_positions, std::size_t k,
                                const AttentionWeights& aw, const MlpWeights& rel_pe_mlp,
                                int threads = 1, Matrix* attn_out = nullptr) {
    const std::size_t n = state.values.rows();
    const std::size_t c = state.values.cols();
    const std::size_t m = patch_features.rows();
    if (patch_features.cols() != c)
        throw std::invalid_argument("knn_cross_attention: feature dim mismatch");
    if (aw.wq.rows() != c || rel_pe_mlp.out_dim() != c)
        throw std::invalid_argument("knn_cross_attention: weight shape mismatch");

    const KnnResult nbrs = knn(state.positions, patch_positions, k, threads);
    const std::size_t kk = nbrs.k;
    const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));

    // patch projections are query-independent
    Matrix keys(m, c), vals(m, c);
    parallel_for(m, threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t j = b; j < e; ++j) {
            matvec_row(patch_features.row(j), aw.wk, keys.row(j));
            matvec_row(patch_features.row(j), aw.wv, vals.row(j));
        }
    });

    if (attn_out) *attn_out = Matrix(n, kk);

    Matrix delta(n, c);
    parallel_for(n, threads, [&](std::size_t b, std::size_t e) {
        std::vector<double> qin(c), qbase(c), pe(c), hidden(rel_pe_mlp.hidden_dim());
        std::vector<double> logits(kk), ctx(c);
        Vec3 rel;
        for (std::size_t i = b; i < e; ++i) {
            for (std::size_t t = 0; t < c; ++t) qin[t] = state.values(i, t) + state.pos_enc(i, t);
            matvec_row(qin.data(), aw.wq, qbase.data());
            const Vec3 pi = state.positions.row3(i);
            const std::uint32_t* idx = nbrs.row_indices(i);

            double max_logit = -std::numeric_limits<double>::infinity();
            std::vector<double> pes(kk * c);
            for (std::size_t jj = 0; jj < kk; ++jj) {
                const std::uint32_t j = idx[jj];
                const Vec3 pj = patch_positions.row3(j);
                rel = {pj[0] - pi[0], pj[1] - pi[1], pj[2] - pi[2]};
                double relv[3] = {rel[0], rel[1], rel[2]};
                rel_pe_mlp.forward_row(relv, pes.data() + jj * c, hidden.data());
                const double* pe_j = pes.data() + jj * c;
                double s = 0.0;
                const double* key = keys.row(j);
                for (std::size_t t = 0; t < c; ++t) s += (qbase[t] + pe_j[t]) * (key[t] + pe_j[t]);
                logits[jj] = s * inv_sqrt_c;
                max_logit = std::max(max_logit, logits[jj]);
            }
            double denom = 0.0;
            for (std::size_t jj = 0; jj < kk; ++jj) {
                logits[jj] = std::exp(logits[jj] - max_logit);
                denom += logits[jj];
            }
            std::fill(ctx.begin(), ctx.end(), 0.0);
            for (std::size_t jj = 0; jj < kk; ++jj) {
                const double a = logits[jj] / denom;
                if (attn_out) (*attn_out)(i, jj) = a;
                const double* val = vals.row(idx[jj]);
                for (std::size_t t = 0; t < c; ++t) ctx[t] += a * val[t];
            }
            matvec_row(ctx.data(), aw.wo, delta.row(i));
        }
    });

    for (std::size_t i = 0; i < n; ++i) {
        double* v = state.values.row(i);
        const double* d = delta.row(i);
        for (std::size_t t = 0; t < c; ++t) v[t] += d[t];
    }
}

inline double sigma_for(const double* x, const std::vector<double>& sigma_w, double sigma_b) {
    return softplus(dot_n(x, sigma_w.data(), sigma_w.size()) + sigma_b);
}

/// Raw attention logits of the distance-adaptive self-attention over the
/// sequence (queries ++ loc token):  logit_ij = Q_i.K_j / sqrt(C) - sigma_i D_ij
/// with D = 0 for every pair involving the loc token. Exposed separately so
/// the bias structure can be asserted directly.
inline Matrix distance_adaptive_logits(const Matrix& values, const Matrix& positions,
                                       const std::vector<double>& loc_embedding,
                                       const AttentionWeights& aw,
                                       const std::vector<double>& sigma_w, double sigma_b) {
    const std::size_t n = values.rows();
    const std::size_t c = values.cols();
    const std::size_t total = n + 1;
    const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));

    Matrix seq(total, c);
    for (std::size_t i = 0; i < n; ++i)
        std::copy(values.row(i), values.row(i) + c, seq.row(i));
    std::copy(loc_embedding.begin(), loc_embedding.end(), seq.row(n));

    Matrix q(total, c), kmat(total, c);
    std::vector<double> sigma(total);
    for (std::size_t i = 0; i < total; ++i) {
        matvec_row(seq.row(i), aw.wq, q.row(i));
        matvec_row(seq.row(i), aw.wk, kmat.row(i));
        sigma[i] = sigma_for(seq.row(i), sigma_w, sigma_b);
    }

    Matrix logits(total, total);
    for (std::size_t i = 0; i < total; ++i) {
        for (std::size_t j = 0; j < total; ++j) {
            double d = 0.0;
            if (i < n && j < n)
                d = std::sqrt(squared_distance(positions.row3(i), positions.row3(j)));
            logits(i, j) = dot_n(q.row(i), kmat.row(j), c) * inv_sqrt_c - sigma[i] * d;
        }
    }
    return logits;
}

/// Distance-adaptive self-attention over (queries ++ loc token) with residual
/// updates of both. attn_out (optional) receives the (N+1)x(N+1) softmax.
inline void distance_adaptive_self_attention(QueryState& state, LocationToken& loc,
                                             const AttentionWeights& aw,
                                             const std::vector<double>& sigma_w, double sigma_b,
                                             int threads = 1, Matrix* attn_out = nullptr) {
    const std::size_t n = state.values.rows();
    const std::size_t c = state.values.cols();
    if (loc.embedding.size() != c)
        throw std::invalid_argument("distance_adaptive_self_attention: loc token dim mismatch");
    const std::size_t total = n + 1;

    const Matrix logits = distance_adaptive_logits(state.values, state.positions, loc.embedding,
                                                   aw, sigma_w, sigma_b);

    Matrix seq(total, c);
    for (std::size_t i = 0; i < n; ++i) std::copy(state.values.row(i), state.values.row(i) + c, seq.row(i));
    std::copy(loc.embedding.begin(), loc.embedding.end(), seq.row(n));

    Matrix vmat(total, c);
    parallel_for(total, threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t j = b; j < e; ++j) matvec_row(seq.row(j), aw.wv, vmat.row(j));
    });

    if (attn_out) *attn_out = Matrix(total, total);

    Matrix delta(total, c);
    parallel_for(total, threads, [&](std::size_t b, std::size_t e) {
        std::vector<double> row(total), ctx(c);
        for (std::size_t i = b; i < e; ++i) {
            double max_logit = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < total; ++j) max_logit = std::max(max_logit, logits(i, j));
            double denom = 0.0;
            for (std::size_t j = 0; j < total; ++j) {
                row[j] = std::exp(logits(i, j) - max_logit);
                denom += row[j];
            }
            std::fill(ctx.begin(), ctx.end(), 0.0);
            for (std::size_t j = 0; j < total; ++j) {
                const double a = row[j] / denom;
                if (attn_out) (*attn_out)(i, j) = a;
                const double* val = vmat.row(j);
                for (std::size_t t = 0; t < c; ++t) ctx[t] += a * val[t];
            }
            matvec_row(ctx.data(), aw.wo, delta.row(i));
        }
    });

    for (std::size_t i = 0; i < n; ++i) {
        double* v = state.values.row(i);
        for (std::size_t t = 0; t < c; ++t) v[t] += delta(i, t);
    }
    for (std::size_t t = 0; t < c; ++t) loc.embedding[t] += delta(n, t);
}

/// Decode each query into a box: the two-layer MLP emits a center offset and
/// raw sizes, softplus(raw) + 1e-4 keeps sizes strictly positive.
inline std::vector<Box3D> box_head_forward(const Matrix& values, const Matrix& positions,
                                           const MlpWeights& head) {
    if (head.out_dim() != 6 || head.in_dim() != values.cols())
        throw std::invalid_argument("box_head_forward: weight shape mismatch");
    const std::size_t n = values.rows();
    std::vector<Box3D> boxes(n);
    std::vector<double> hidden(head.hidden_dim()), raw(6);
    for (std::size_t i = 0; i < n; ++i) {
        head.forward_row(values.row(i), raw.data(), hidden.data());
        const Vec3 p = positions.row3(i);
        boxes[i].center = {p[0] + raw[0], p[1] + raw[1], p[2] + raw[2]};
        boxes[i].size = {softplus(raw[3]) + 1e-4, softplus(raw[4]) + 1e-4, softplus(raw[5]) + 1e-4};
    }
    return boxes;
}

struct GroundingOutput {
    std::vector<std::vector<Box3D>> boxes_per_layer;  // L entries of N boxes each
    std::vector<double> scores;                       // cosine in [-1, 1]
    std::vector<std::uint32_t> selected;
};

/// Per-layer query values and final loc embedding, kept for training and
/// inspection.
struct DecoderTrace {
    QueryState state;
    std::vector<Matrix> values_per_layer;
    std::vector<double> loc_final;
};

inline double cosine_or_zero(const double* a, const double* b, std::size_t n) {
    const double na = std::sqrt(dot_n(a, a, n));
    const double nb = std::sqrt(dot_n(b, b, n));
    if (na == 0.0 || nb == 0.0) return 0.0;  // degenerate (e.g. zero-layer decoder)
    return dot_n(a, b, n) / (na * nb);
}

/// Full decoder: FPS query init, then per layer k-NN cross-attention followed
/// by distance-adaptive self-attention, with a box prediction after each
/// layer. Scores are cosine similarities between final query values and the
/// final loc embedding.
inline GroundingOutput grounding_forward(const Matrix& patch_features, const Matrix& patch_positions,
                                         const LocationToken& loc_in, const DecoderConfig& cfg,
                                         const DecoderWeights& weights, int threads = 1,
                                         DecoderTrace* trace = nullptr) {
    cfg.validate();
    weights.validate(cfg);
    if (patch_positions.rows() == 0) throw std::invalid_argument("grounding_forward: empty patches");
    if (loc_in.embedding.size() != cfg.dim)
        throw std::invalid_argument("grounding_forward: loc token dim mismatch");
    for (double v : loc_in.embedding)
        if (!std::isfinite(v)) throw std::invalid_argument("grounding_forward: non-finite loc token");

    QueryState state = init_queries(patch_positions, cfg, weights, threads);
    LocationToken loc = loc_in;

    GroundingOutput out;
    out.boxes_per_layer.reserve(cfg.layers);
    if (trace) trace->values_per_layer.clear();

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        knn_cross_attention(state, patch_features, patch_positions, cfg.knn_schedule[l],
                            weights.layers[l], weights.rel_pe_mlp, threads);
        distance_adaptive_self_attention(state, loc, weights.layers[l], weights.sigma_w,
                                         weights.sigma_b, threads);
        out.boxes_per_layer.push_back(box_head_forward(state.values, state.positions, weights.box_head));
        if (trace) trace->values_per_layer.push_back(state.values);
    }

    const std::size_t n = state.values.rows();
    out.scores.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        out.scores[i] = cosine_or_zero(state.values.row(i), loc.embedding.data(), state.values.cols());

    if (cfg.multi_target) {
        for (std::size_t i = 0; i < n; ++i)
            if (out.scores[i] >= cfg.selection_threshold) out.selected.push_back(static_cast<std::uint32_t>(i));
    } else {
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (out.scores[i] > out.scores[best]) best = i;
        out.selected.push_back(static_cast<std::uint32_t>(best));
    }

    if (trace) {
        trace->state = std::move(state);
        trace->loc_final = loc.embedding;
    }
    return out;
}

}  // namespace voxlift
