#pragma once

#include <unordered_map>

#include "voxlift/lift.hpp"
#include "voxlift/spatial.hpp"

namespace voxlift {

struct PoolingStrategy {
    enum class Kind { kVoxel, kFps } kind = Kind::kVoxel;
    double voxel_size = 0.2;
    std::size_t count = 0;
    std::size_t seed_index = 0;

    static PoolingStrategy voxel(double size) { return {Kind::kVoxel, size, 0, 0}; }
    static PoolingStrategy fps(std::size_t count, std::size_t seed) {
        return {Kind::kFps, 0.0, count, seed};
    }
};

/// Compressed token set. Under the voxel strategy counts sum to the input
/// size; under fps every count is 1 and features are copied verbatim.
struct PooledTokens {
    Matrix features;   // t x d
    Matrix positions;  // t x 3
    std::vector<std::uint32_t> counts;
    PoolingStrategy strategy;

    std::size_t size() const { return positions.rows(); }
};

/// Average features and positions over each occupied voxel of an origin-
/// anchored metric grid. Group member order is ascending input index and
/// output groups are ordered by first-member input index, which makes the
/// sums bit-stable regardless of thread count.
inline PooledTokens voxel_pool(const Patch3DSet& patches, double voxel_size) {
    if (!(voxel_size > 0.0)) throw std::invalid_argument("voxel_pool: voxel_size must be > 0");
    const std::size_t n = patches.size();
    if (n == 0) throw std::invalid_argument("voxel_pool: empty input");
    const std::size_t d = patches.features.cols();

    std::unordered_map<VoxelKey, std::uint32_t, VoxelKeyHash> group_of;
    group_of.reserve(n);
    std::vector<std::uint32_t> token_group(n);
    std::uint32_t n_groups = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const VoxelKey key = voxel_key(patches.positions.row3(i), voxel_size);
        auto [it, inserted] = group_of.try_emplace(key, n_groups);
        if (inserted) ++n_groups;
        token_group[i] = it->second;
    }

    PooledTokens out;
    out.strategy = PoolingStrategy::voxel(voxel_size);
    out.features = Matrix(n_groups, d);
    out.positions = Matrix(n_groups, 3);
    out.counts.assign(n_groups, 0);

    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t g = token_group[i];
        ++out.counts[g];
        const double* f = patches.features.row(i);
        double* acc = out.features.row(g);
        for (std::size_t c = 0; c < d; ++c) acc[c] += f[c];
        const double* p = patches.positions.row(i);
        double* pacc = out.positions.row(g);
        for (int a = 0; a < 3; ++a) pacc[a] += p[a];
    }
    for (std::uint32_t g = 0; g < n_groups; ++g) {
        const double inv = 1.0 / static_cast<double>(out.counts[g]);
        double* acc = out.features.row(g);
        for (std::size_t c = 0; c < d; ++c) acc[c] *= inv;
        double* pacc = out.positions.row(g);
        for (int a = 0; a < 3; ++a) pacc[a] *= inv;
    }
    return out;
}

/// Keep a fixed-size farthest-point subset; rows are copied, never averaged.
inline PooledTokens fps_pool(const Patch3DSet& patches, std::size_t count, std::size_t seed_index) {
    const std::size_t n = patches.size();
    if (count < 1 || count > n) throw std::invalid_argument("fps_pool: need 1 <= count <= token count");
    const std::vector<std::uint32_t> picks = fps(patches.positions, count, seed_index);

    PooledTokens out;
    out.strategy = PoolingStrategy::fps(count, seed_index);
    out.features = Matrix(count, patches.features.cols());
    out.positions = Matrix(count, 3);
    out.counts.assign(count, 1);
    for (std::size_t t = 0; t < count; ++t) {
        const std::uint32_t src = picks[t];
        const double* f = patches.features.row(src);
        std::copy(f, f + patches.features.cols(), out.features.row(t));
        out.positions.set_row3(t, patches.positions.row3(src));
    }
    return out;
}

/// Enforce a post-pool token budget by FPS-subselecting when exceeded.
/// Kept tokens retain their member counts.
inline PooledTokens cap_tokens(const PooledTokens& tokens, std::size_t cap, std::size_t seed_index = 0) {
    if (cap < 1) throw std::invalid_argument("cap_tokens: cap must be >= 1");
    if (tokens.size() <= cap) return tokens;
    const std::vector<std::uint32_t> picks = fps(tokens.positions, cap, seed_index);

    PooledTokens out;
    out.strategy = tokens.strategy;
    out.features = Matrix(cap, tokens.features.cols());
    out.positions = Matrix(cap, 3);
    out.counts.resize(cap);
    for (std::size_t t = 0; t < cap; ++t) {
        const std::uint32_t src = picks[t];
        const double* f = tokens.features.row(src);
        std::copy(f, f + tokens.features.cols(), out.features.row(t));
        out.positions.set_row3(t, tokens.positions.row3(src));
        out.counts[t] = tokens.counts[src];
    }
    return out;
}

}  // namespace voxlift
