#pragma once

#include "voxlift/objective.hpp"
#include "voxlift/pooling.hpp"

namespace voxlift {

struct SceneEval {
    std::string scene_id;
    double best_iou = 0.0;
    std::vector<double> hits;  // one per threshold; 0/1 in single-target mode, F1 otherwise
};

struct EvalReport {
    std::vector<double> thresholds;
    std::vector<double> acc_at;  // fraction per threshold
    std::vector<SceneEval> per_scene;
    std::size_t n_scenes = 0;
};

namespace detail {

// greedy one-to-one matching by descending IoU (stand-in for the full
// multi-target protocol); returns matched IoUs
inline std::vector<double> greedy_iou_match(const std::vector<Box3D>& preds,
                                            const std::vector<Box3D>& gts) {
    struct Entry {
        double iou;
        std::size_t i, j;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (std::size_t j = 0; j < gts.size(); ++j) entries.push_back({iou3d(preds[i], gts[j]), i, j});
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.iou != b.iou) return a.iou > b.iou;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });
    std::vector<char> used_p(preds.size(), 0), used_g(gts.size(), 0);
    std::vector<double> matched;
    for (const Entry& e : entries) {
        if (used_p[e.i] || used_g[e.j]) continue;
        used_p[e.i] = 1;
        used_g[e.j] = 1;
        matched.push_back(e.iou);
    }
    return matched;
}

}  // namespace detail

/// Accuracy at IoU thresholds over aligned per-scene predictions and targets.
/// Single-target scoring: the top selected box is hit at tau when its best
/// IoU against any target reaches tau. Multi-target scoring replaces the hit
/// with an F1 over a greedy one-to-one IoU matching.
inline EvalReport acc_at_iou(const std::vector<std::vector<Box3D>>& preds,
                             const std::vector<std::vector<Box3D>>& gts,
                             const std::vector<double>& thresholds,
                             const std::vector<std::string>& scene_ids = {},
                             bool multi_target = false) {
    if (preds.size() != gts.size()) throw std::invalid_argument("acc_at_iou: scene list length mismatch");
    if (!scene_ids.empty() && scene_ids.size() != preds.size())
        throw std::invalid_argument("acc_at_iou: scene id list length mismatch");

    EvalReport report;
    report.thresholds = thresholds;
    report.n_scenes = preds.size();
    report.acc_at.assign(thresholds.size(), 0.0);

    for (std::size_t s = 0; s < preds.size(); ++s) {
        SceneEval se;
        se.scene_id = scene_ids.empty() ? "scene_" + std::to_string(s) : scene_ids[s];
        se.hits.assign(thresholds.size(), 0.0);

        if (multi_target) {
            const std::vector<double> matched = detail::greedy_iou_match(preds[s], gts[s]);
            for (double iou : matched) se.best_iou = std::max(se.best_iou, iou);
            const double denom = static_cast<double>(preds[s].size() + gts[s].size());
            for (std::size_t t = 0; t < thresholds.size(); ++t) {
                std::size_t ok = 0;
                for (double iou : matched)
                    if (iou >= thresholds[t]) ++ok;
                se.hits[t] = denom > 0.0 ? 2.0 * static_cast<double>(ok) / denom : 0.0;
            }
        } else {
            if (!preds[s].empty()) {
                const Box3D& top = preds[s].front();
                for (const Box3D& gt : gts[s]) se.best_iou = std::max(se.best_iou, iou3d(top, gt));
            }
            for (std::size_t t = 0; t < thresholds.size(); ++t)
                se.hits[t] = se.best_iou >= thresholds[t] ? 1.0 : 0.0;
        }

        for (std::size_t t = 0; t < thresholds.size(); ++t) report.acc_at[t] += se.hits[t];
        report.per_scene.push_back(std::move(se));
    }
    if (report.n_scenes > 0)
        for (double& a : report.acc_at) a /= static_cast<double>(report.n_scenes);
    return report;
}

struct AblationRow {
    std::string strategy;  // "voxel" | "fps"
    double parameter = 0.0;
    double mean_tokens = 0.0;
    double max_covering_radius = 0.0;
    std::vector<std::size_t> tokens_per_scene;
    std::vector<double> radius_per_scene;
};

namespace detail {

inline double covering_radius(const Patch3DSet& patches, const Matrix& kept_positions) {
    const KnnResult nn = knn_bruteforce(patches.positions, kept_positions, 1);
    double r = 0.0;
    for (std::size_t i = 0; i < nn.query_count; ++i) r = std::max(r, nn.row_distances(i)[0]);
    return r;
}

}  // namespace detail

/// Token-accounting harness over both pooling strategies: per configuration,
/// mean token count and the worst distance from any input patch to its
/// nearest kept token.
inline std::vector<AblationRow> pooling_ablation(const std::vector<Patch3DSet>& scenes,
                                                 const std::vector<double>& voxel_sizes,
                                                 const std::vector<std::size_t>& fps_counts) {
    if (scenes.empty()) throw std::invalid_argument("pooling_ablation: no scenes");
    std::vector<AblationRow> rows;

    for (double size : voxel_sizes) {
        AblationRow row;
        row.strategy = "voxel";
        row.parameter = size;
        for (const Patch3DSet& scene : scenes) {
            const PooledTokens pooled = voxel_pool(scene, size);
            row.tokens_per_scene.push_back(pooled.size());
            row.radius_per_scene.push_back(detail::covering_radius(scene, pooled.positions));
        }
        rows.push_back(std::move(row));
    }
    for (std::size_t count : fps_counts) {
        AblationRow row;
        row.strategy = "fps";
        row.parameter = static_cast<double>(count);
        for (const Patch3DSet& scene : scenes) {
            const PooledTokens pooled = fps_pool(scene, std::min(count, scene.size()), 0);
            row.tokens_per_scene.push_back(pooled.size());
            row.radius_per_scene.push_back(detail::covering_radius(scene, pooled.positions));
        }
        rows.push_back(std::move(row));
    }

    for (AblationRow& row : rows) {
        double total = 0.0;
        for (std::size_t t : row.tokens_per_scene) total += static_cast<double>(t);
        row.mean_tokens = total / static_cast<double>(row.tokens_per_scene.size());
        for (double r : row.radius_per_scene) row.max_covering_radius = std::max(row.max_covering_radius, r);
    }
    return rows;
}

}  // namespace voxlift
