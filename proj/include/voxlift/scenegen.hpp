#pragma once

#include "voxlift/geometry.hpp"

namespace voxlift {

class CapacityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class FeatureMode { kRandom, kBoxOnehotPlusNoise };

/// Deterministic synthetic-scene recipe: non-overlapping axis-aligned boxes
/// in a room, cameras on a circular orbit looking at the room center.
struct SceneSpec {
    std::uint64_t seed = 0;
    std::size_t n_boxes = 4;
    Vec3 room_extent{6.0, 6.0, 3.0};  // x/y centered at origin, z in [0, ez]
    std::size_t n_views = 32;
    int width = 336, height = 336, patch = 14;
    std::size_t feature_dim = 64;
    FeatureMode feature_mode = FeatureMode::kBoxOnehotPlusNoise;
    double box_size_min = 0.3, box_size_max = 0.8;  // per-axis edge (meters)

    void validate() const {
        if (n_boxes < 1 || n_views < 1) throw std::invalid_argument("SceneSpec: need boxes and views >= 1");
        if (feature_dim < 1) throw std::invalid_argument("SceneSpec: feature_dim must be >= 1");
        patch_grid_dims(width, height, patch);
        for (double e : room_extent)
            if (!(e > 0.0)) throw std::invalid_argument("SceneSpec: room extent must be positive");
        if (!(box_size_min > 0.0) || box_size_max < box_size_min)
            throw std::invalid_argument("SceneSpec: invalid box size range");
    }
};

struct GroundTruth {
    std::vector<Box3D> boxes;
    std::vector<int> labels;
};

struct GeneratedScene {
    std::vector<CameraView> views;
    GroundTruth gt;
};

/// Slab intersection; returns the smallest strictly positive ray parameter,
/// or +inf for a miss. A ray starting inside hits the exit face.
inline double ray_box_intersect(const Vec3& origin, const Vec3& dir, const Box3D& box) {
    const double kInf = std::numeric_limits<double>::infinity();
    double tlo = -kInf, thi = kInf;
    for (int a = 0; a < 3; ++a) {
        if (dir[a] == 0.0) {
            if (origin[a] < box.min(a) || origin[a] > box.max(a)) return kInf;
            continue;
        }
        double t1 = (box.min(a) - origin[a]) / dir[a];
        double t2 = (box.max(a) - origin[a]) / dir[a];
        if (t1 > t2) std::swap(t1, t2);
        tlo = std::max(tlo, t1);
        thi = std::min(thi, t2);
        if (tlo > thi) return kInf;
    }
    if (tlo > 0.0) return tlo;
    if (thi > 0.0) return thi;
    return kInf;
}

/// Exact per-pixel depth against all boxes. Rays leave the camera through
/// pixel centers (px + 0.5, py + 0.5); depth is the camera-frame z of the
/// nearest hit (equal to the ray parameter, since the camera-frame ray has
/// unit z), 0 when nothing is hit. hit_box (optional) receives the index of
/// the hit box per pixel, -1 for misses.
inline std::vector<float> render_depth(const Intrinsics& intr, const Extrinsics& extr,
                                       const std::vector<Box3D>& boxes, int threads = 1,
                                       std::vector<std::int32_t>* hit_box = nullptr) {
    intr.validate();
    extr.validate();
    const std::size_t n_px = static_cast<std::size_t>(intr.width) * intr.height;
    std::vector<float> depth(n_px, 0.0f);
    if (hit_box) hit_box->assign(n_px, -1);
    const Vec3 origin = extr.position();

    parallel_for(static_cast<std::size_t>(intr.height), threads, [&](std::size_t yb, std::size_t ye) {
        for (std::size_t py = yb; py < ye; ++py) {
            for (int px = 0; px < intr.width; ++px) {
                const Vec3 dir_cam{(px + 0.5 - intr.cx) / intr.fx, (py + 0.5 - intr.cy) / intr.fy, 1.0};
                const Vec3 dir = extr.rotate(dir_cam);
                double best = std::numeric_limits<double>::infinity();
                std::int32_t best_box = -1;
                for (std::size_t b = 0; b < boxes.size(); ++b) {
                    const double t = ray_box_intersect(origin, dir, boxes[b]);
                    if (t < best) {
                        best = t;
                        best_box = static_cast<std::int32_t>(b);
                    }
                }
                const std::size_t idx = py * intr.width + px;
                if (best_box >= 0) {
                    depth[idx] = static_cast<float>(best);
                    if (hit_box) (*hit_box)[idx] = best_box;
                }
            }
        }
    });
    return depth;
}

namespace detail {

inline bool boxes_overlap(const Box3D& a, const Box3D& b) {
    for (int ax = 0; ax < 3; ++ax)
        if (std::min(a.max(ax), b.max(ax)) - std::max(a.min(ax), b.min(ax)) <= 0.0) return false;
    return true;
}

/// camera-to-world from position + look-at target, z-up world, CV camera
/// axes (x right, y down, z forward)
inline Extrinsics look_at(const Vec3& pos, const Vec3& target) {
    const Vec3 forward = normalized(target - pos);
    Vec3 up_hint{0.0, 0.0, 1.0};
    if (std::abs(dot(forward, up_hint)) > 0.99) up_hint = {0.0, 1.0, 0.0};
    const Vec3 x_cam = normalized(cross(forward, up_hint));
    const Vec3 y_cam = cross(forward, x_cam);  // both unit and orthogonal
    Extrinsics e;
    e.camera_to_world = {x_cam[0], y_cam[0], forward[0], pos[0],
                         x_cam[1], y_cam[1], forward[1], pos[1],
                         x_cam[2], y_cam[2], forward[2], pos[2],
                         0.0,      0.0,      0.0,        1.0};
    return e;
}

}  // namespace detail

/// Place non-overlapping boxes by rejection sampling. Attempts are capped at
/// 10 * n_boxes * 100 in total.
inline GroundTruth place_boxes(const SceneSpec& spec) {
    Rng rng(derive_seed(spec.seed, 1));
    GroundTruth gt;
    const std::size_t max_attempts = 10 * spec.n_boxes * 100;
    std::size_t attempts = 0;
    const Vec3 lo{-spec.room_extent[0] / 2, -spec.room_extent[1] / 2, 0.0};
    const Vec3 hi{spec.room_extent[0] / 2, spec.room_extent[1] / 2, spec.room_extent[2]};

    while (gt.boxes.size() < spec.n_boxes) {
        if (++attempts > max_attempts)
            throw CapacityError("place_boxes: rejection sampling exceeded attempt budget");
        Box3D box;
        bool fits = true;
        for (int a = 0; a < 3; ++a) {
            const double room = hi[a] - lo[a];
            box.size[a] = std::min(rng.uniform(spec.box_size_min, spec.box_size_max), 0.8 * room);
            if (box.size[a] >= room) {
                fits = false;
                break;
            }
            box.center[a] = rng.uniform(lo[a] + box.size[a] / 2, hi[a] - box.size[a] / 2);
        }
        if (!fits) continue;
        bool overlaps = false;
        for (const Box3D& other : gt.boxes)
            if (detail::boxes_overlap(box, other)) {
                overlaps = true;
                break;
            }
        if (overlaps) continue;
        gt.labels.push_back(static_cast<int>(gt.boxes.size()));
        gt.boxes.push_back(box);
    }
    return gt;
}

/// Full deterministic scene: boxes, orbit cameras, exact depth, features.
/// A floor slab under the room is rendered along with the target boxes so
/// depth maps are dense the way real scans are; floor hits carry no one-hot.
inline GeneratedScene generate(const SceneSpec& spec, int threads = 1) {
    spec.validate();
    GeneratedScene scene;
    scene.gt = place_boxes(spec);

    std::vector<Box3D> geometry = scene.gt.boxes;
    geometry.push_back(Box3D{{0.0, 0.0, -0.05},
                             {spec.room_extent[0], spec.room_extent[1], 0.1}});
    const std::size_t n_targets = scene.gt.boxes.size();

    const Vec3 center{0.0, 0.0, spec.room_extent[2] / 2};
    const double radius = 0.55 * std::sqrt(spec.room_extent[0] * spec.room_extent[0] +
                                           spec.room_extent[1] * spec.room_extent[1]);
    const double cam_z = 0.8 * spec.room_extent[2];
    const auto [gw, gh] = patch_grid_dims(spec.width, spec.height, spec.patch);

    for (std::size_t v = 0; v < spec.n_views; ++v) {
        const double angle = 2.0 * 3.14159265358979323846 * static_cast<double>(v) /
                             static_cast<double>(spec.n_views);
        CameraView view;
        view.intrinsics.fx = view.intrinsics.fy = 0.7 * spec.width;
        view.intrinsics.cx = spec.width / 2.0;
        view.intrinsics.cy = spec.height / 2.0;
        view.intrinsics.width = spec.width;
        view.intrinsics.height = spec.height;
        view.extrinsics = detail::look_at({radius * std::cos(angle), radius * std::sin(angle), cam_z}, center);
        view.patch = spec.patch;

        std::vector<std::int32_t> hit_box;
        view.depth = render_depth(view.intrinsics, view.extrinsics, geometry, threads, &hit_box);

        view.feature_dim = spec.feature_dim;
        view.features.resize(static_cast<std::size_t>(gw) * gh * spec.feature_dim);
        Rng rng(derive_seed(spec.seed, 2000 + v));
        if (spec.feature_mode == FeatureMode::kRandom) {
            for (float& f : view.features) f = static_cast<float>(rng.uniform(-1.0, 1.0));
        } else {
            // patches whose depth sample hit target box b get one-hot(b mod d)
            // plus Gaussian noise; floor hits and empty patches get noise only
            for (int j = 0; j < gh; ++j) {
                for (int i = 0; i < gw; ++i) {
                    const int px = nearest_pixel_index((i + 0.5) * spec.patch, spec.width);
                    const int py = nearest_pixel_index((j + 0.5) * spec.patch, spec.height);
                    const std::int32_t b = hit_box[static_cast<std::size_t>(py) * spec.width + px];
                    float* row = view.features.data() +
                                 (static_cast<std::size_t>(j) * gw + i) * spec.feature_dim;
                    for (std::size_t cdim = 0; cdim < spec.feature_dim; ++cdim)
                        row[cdim] = static_cast<float>(0.05 * rng.normal());
                    if (b >= 0 && static_cast<std::size_t>(b) < n_targets)
                        row[static_cast<std::size_t>(b) % spec.feature_dim] += 1.0f;
                }
            }
        }
        scene.views.push_back(std::move(view));
    }
    return scene;
}

}  // namespace voxlift
