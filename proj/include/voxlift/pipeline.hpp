#pragma once

#include "voxlift/io.hpp"

namespace voxlift {

inline PooledTokens pool_with_strategy(const Patch3DSet& patches, const PoolingStrategy& strategy,
                                       std::size_t cap) {
    PooledTokens pooled;
    if (strategy.kind == PoolingStrategy::Kind::kVoxel)
        pooled = voxel_pool(patches, strategy.voxel_size);
    else
        pooled = fps_pool(patches, strategy.count, strategy.seed_index);
    return cap_tokens(pooled, cap);
}

struct PipelineResult {
    Patch3DSet patches;
    PooledTokens pooled;
    GroundingOutput output;
    DecoderTrace trace;
};

/// lift -> pool -> grounding_forward over in-memory views.
inline PipelineResult run_grounding_pipeline(const std::vector<CameraView>& views, const WeightSet& ws,
                                             const LocationToken& loc, const RunConfig& cfg,
                                             int threads = 1) {
    PipelineResult result;
    result.patches = lift_scene(views, ws.pos_mlp, threads);
    if (result.patches.size() == 0)
        throw std::runtime_error("pipeline: no valid tokens after lift (all depth invalid)");
    result.pooled = pool_with_strategy(result.patches, cfg.pooling, cfg.pool_cap);
    result.output = grounding_forward(result.pooled.features, result.pooled.positions, loc,
                                      cfg.decoder, ws.decoder, threads, &result.trace);
    return result;
}

/// Decode one scene with frozen weights and capture what box-head training
/// needs from it.
inline TrainScene make_train_scene(const std::vector<CameraView>& views, const WeightSet& ws,
                                   const LocationToken& loc, const RunConfig& cfg,
                                   const GroundTruth& gt, int threads = 1) {
    const PipelineResult pr = run_grounding_pipeline(views, ws, loc, cfg, threads);
    TrainScene scene;
    scene.values_per_layer = pr.trace.values_per_layer;
    if (scene.values_per_layer.empty()) scene.values_per_layer.push_back(pr.trace.state.values);
    scene.positions = pr.trace.state.positions;
    scene.gt_boxes = gt.boxes;
    scene.loc_embedding = pr.trace.loc_final;
    return scene;
}

}  // namespace voxlift
