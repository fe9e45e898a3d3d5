#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "voxlift/common.hpp"

namespace voxlift {

/// Pinhole intrinsics in pixels.
struct Intrinsics {
    double fx = 0.0, fy = 0.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("Intrinsics: focal lengths must be positive");
        if (width <= 0 || height <= 0) throw std::invalid_argument("Intrinsics: image size must be positive");
        if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
            throw std::invalid_argument("Intrinsics: principal point outside image");
    }
};

/// Rigid camera-to-world transform, stored as a row-major 4x4 matrix.
struct Extrinsics {
    std::array<double, 16> camera_to_world{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

    static Extrinsics identity() { return Extrinsics{}; }

    double r(int i, int j) const { return camera_to_world[i * 4 + j]; }

    Vec3 rotate(const Vec3& v) const {
        return {r(0, 0) * v[0] + r(0, 1) * v[1] + r(0, 2) * v[2],
                r(1, 0) * v[0] + r(1, 1) * v[1] + r(1, 2) * v[2],
                r(2, 0) * v[0] + r(2, 1) * v[1] + r(2, 2) * v[2]};
    }

    /// camera frame -> world frame
    Vec3 apply(const Vec3& p) const {
        Vec3 out = rotate(p);
        return {out[0] + r(0, 3), out[1] + r(1, 3), out[2] + r(2, 3)};
    }

    /// world frame -> camera frame (R is orthonormal, so the inverse is R^T)
    Vec3 apply_inverse(const Vec3& p) const {
        const Vec3 d{p[0] - r(0, 3), p[1] - r(1, 3), p[2] - r(2, 3)};
        return {r(0, 0) * d[0] + r(1, 0) * d[1] + r(2, 0) * d[2],
                r(0, 1) * d[0] + r(1, 1) * d[1] + r(2, 1) * d[2],
                r(0, 2) * d[0] + r(1, 2) * d[1] + r(2, 2) * d[2]};
    }

    Vec3 position() const { return {r(0, 3), r(1, 3), r(2, 3)}; }

    void validate(double tol = 1e-6) const {
        // R^T R = I
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += r(k, i) * r(k, j);
                const double expect = (i == j) ? 1.0 : 0.0;
                if (std::abs(s - expect) > tol)
                    throw std::invalid_argument("Extrinsics: rotation block not orthonormal");
            }
        }
        const double det =
            r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) -
            r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0)) +
            r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
        if (std::abs(det - 1.0) > tol) throw std::invalid_argument("Extrinsics: rotation determinant must be +1");
        if (std::abs(r(3, 0)) > 1e-9 || std::abs(r(3, 1)) > 1e-9 || std::abs(r(3, 2)) > 1e-9 ||
            std::abs(r(3, 3) - 1.0) > 1e-9)
            throw std::invalid_argument("Extrinsics: last row must be (0,0,0,1)");
    }
};

/// One posed RGB-D view. Depth is metric (meters), 0 marks invalid pixels.
/// The optional patch-feature grid is row-major (patch row, patch col, channel)
/// with dims floor(H/P) x floor(W/P) x feature_dim.
struct CameraView {
    Intrinsics intrinsics;
    Extrinsics extrinsics;
    int patch = 14;
    std::vector<float> depth;           // height * width
    std::size_t feature_dim = 0;        // 0 = no features
    std::vector<float> features;        // grid_h * grid_w * feature_dim

    float depth_at(int px, int py) const {
        return depth[static_cast<std::size_t>(py) * intrinsics.width + px];
    }

    void validate() const {
        intrinsics.validate();
        extrinsics.validate();
        if (patch < 1) throw std::invalid_argument("CameraView: patch size must be >= 1");
        if (depth.size() != static_cast<std::size_t>(intrinsics.width) * intrinsics.height)
            throw std::invalid_argument("CameraView: depth map size mismatch");
        for (float z : depth)
            if (z < 0.0f) throw std::invalid_argument("CameraView: depth values must be >= 0");
        if (feature_dim > 0) {
            const auto [gw, gh] = grid_dims();
            if (features.size() != static_cast<std::size_t>(gw) * gh * feature_dim)
                throw std::invalid_argument("CameraView: feature grid size mismatch");
        }
    }

    std::pair<int, int> grid_dims() const;
};

/// Backprojected token positions for one view, row-major by (patch row, patch col).
struct PositionField {
    std::vector<Vec3> positions;
    std::vector<std::uint8_t> validity;

    std::size_t size() const { return positions.size(); }
};

/// (w, h) = (floor(width/patch), floor(height/patch))
inline std::pair<int, int> patch_grid_dims(int width, int height, int patch) {
    if (patch < 1) throw std::invalid_argument("patch_grid_dims: patch must be >= 1");
    if (width < patch || height < patch)
        throw std::invalid_argument("patch_grid_dims: image smaller than one patch");
    return {width / patch, height / patch};
}

inline std::pair<int, int> CameraView::grid_dims() const {
    return patch_grid_dims(intrinsics.width, intrinsics.height, patch);
}

/// Index of the pixel whose center (px + 0.5) is nearest to continuous
/// coordinate u; exact ties resolve toward the smaller index.
inline int nearest_pixel_index(double u, int extent) {
    const double t = u - 0.5;
    double base = std::floor(t);
    const double frac = t - base;
    long px = static_cast<long>(base);
    if (frac > 0.5) ++px;
    if (px < 0) px = 0;
    if (px >= extent) px = extent - 1;
    return static_cast<int>(px);
}

struct PixelProjection {
    double u = 0.0, v = 0.0;  // continuous pixel coordinates
    double z = 0.0;           // camera-frame depth (meters)
    bool in_front = false;
};

/// Forward projection of a world point; the inverse route of backprojection.
inline PixelProjection project_point(const Intrinsics& intr, const Extrinsics& extr, const Vec3& world) {
    const Vec3 cam = extr.apply_inverse(world);
    PixelProjection out;
    out.z = cam[2];
    out.in_front = cam[2] > 0.0;
    if (out.in_front) {
        out.u = cam[0] / cam[2] * intr.fx + intr.cx;
        out.v = cam[1] / cam[2] * intr.fy + intr.cy;
    }
    return out;
}

/// Lift every patch center to a world-frame point using the depth sampled at
/// the nearest pixel. Zero or non-finite depth yields a masked entry.
inline PositionField backproject_patch_centers(const CameraView& view, int patch, int threads = 1) {
    view.intrinsics.validate();
    view.extrinsics.validate();
    const auto [gw, gh] = patch_grid_dims(view.intrinsics.width, view.intrinsics.height, patch);
    if (view.depth.size() != static_cast<std::size_t>(view.intrinsics.width) * view.intrinsics.height)
        throw std::invalid_argument("backproject_patch_centers: depth map size mismatch");

    const Intrinsics& intr = view.intrinsics;
    PositionField field;
    field.positions.assign(static_cast<std::size_t>(gw) * gh, Vec3{0, 0, 0});
    field.validity.assign(static_cast<std::size_t>(gw) * gh, 0);

    parallel_for(static_cast<std::size_t>(gh), threads, [&](std::size_t jb, std::size_t je) {
        for (std::size_t j = jb; j < je; ++j) {
            for (int i = 0; i < gw; ++i) {
                const double u = (i + 0.5) * patch;
                const double v = (static_cast<double>(j) + 0.5) * patch;
                const int px = nearest_pixel_index(u, intr.width);
                const int py = nearest_pixel_index(v, intr.height);
                const double z = view.depth_at(px, py);
                const std::size_t idx = j * gw + i;
                if (!(z > 0.0) || !std::isfinite(z)) continue;
                const Vec3 cam{(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z};
                field.positions[idx] = view.extrinsics.apply(cam);
                field.validity[idx] = 1;
            }
        }
    });
    return field;
}

}  // namespace voxlift
