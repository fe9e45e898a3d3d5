#include <gtest/gtest.h>

#include "oracles.hpp"
#include "voxlift/pooling.hpp"

using namespace voxlift;

namespace {

Patch3DSet random_patches(std::size_t n, std::size_t d, Rng& rng, double extent = 3.0) {
    Patch3DSet p;
    p.features = Matrix(n, d);
    p.positions = Matrix(n, 3);
    for (double& v : p.features.data()) v = rng.uniform(-1.0, 1.0);
    for (double& v : p.positions.data()) v = rng.uniform(-extent, extent);
    p.source.resize(n);
    return p;
}

}  // namespace

TEST(Pooling, SingleVoxelMeansEverything) {
    Rng rng(0);
    Patch3DSet p = random_patches(10, 4, rng, 0.05);  // all inside one 0.2 voxel? keep positive octant
    for (double& v : p.positions.data()) v = rng.uniform(0.01, 0.15);
    const PooledTokens out = voxel_pool(p, 0.2);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out.counts[0], 10u);
    for (std::size_t c = 0; c < 4; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 10; ++i) mean += p.features(i, c);
        mean /= 10.0;
        EXPECT_NEAR(out.features(0, c), mean, 1e-12);
    }
}

TEST(Pooling, DistantPointsStaySeparate) {
    Rng rng(1);
    Patch3DSet p = random_patches(2, 3, rng);
    p.positions.set_row3(0, {0.0, 0.0, 0.0});
    p.positions.set_row3(1, {1.0, 0.0, 0.0});
    const PooledTokens out = voxel_pool(p, 0.2);
    ASSERT_EQ(out.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(out.counts[i], 1u);
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.features(i, c), p.features(i, c));
    }
}

TEST(Pooling, MatchesGroupByMeanOracle) {
    Rng rng(7);
    const Patch3DSet p = random_patches(200, 6, rng);
    for (double size : {0.4, 0.3, 0.2}) {
        const PooledTokens out = voxel_pool(p, size);
        const auto groups = oracles::group_mean(p.positions, p.features, size);
        ASSERT_EQ(out.size(), groups.size());
        // match each oracle group to the pooled token in the same voxel
        std::size_t checked = 0;
        for (std::size_t t = 0; t < out.size(); ++t) {
            // reconstruct this token's voxel from any member: use the mean
            // position itself (it stays inside the voxel, means are convex)
            const std::tuple<long, long, long> key{
                static_cast<long>(std::floor(out.positions(t, 0) / size)),
                static_cast<long>(std::floor(out.positions(t, 1) / size)),
                static_cast<long>(std::floor(out.positions(t, 2) / size))};
            const auto it = groups.find(key);
            ASSERT_NE(it, groups.end());
            const auto& [sum, count] = it->second;
            EXPECT_EQ(out.counts[t], static_cast<std::uint32_t>(count));
            for (std::size_t c = 0; c < 6; ++c)
                EXPECT_NEAR(out.features(t, c), sum[c] / count, 1e-12);
            ++checked;
        }
        EXPECT_EQ(checked, groups.size());
    }
}

TEST(Pooling, TokenCountNonIncreasingNestedGrids) {
    // guaranteed for origin-anchored nested grids (0.4 cells are unions of
    // 0.2 cells), whatever the point distribution
    Rng rng(13);
    for (int scene = 0; scene < 20; ++scene) {
        const Patch3DSet p = random_patches(150 + rng.next_below(150), 4, rng);
        EXPECT_LE(voxel_pool(p, 0.4).size(), voxel_pool(p, 0.2).size()) << "scene " << scene;
        EXPECT_LE(voxel_pool(p, 0.8).size(), voxel_pool(p, 0.4).size()) << "scene " << scene;
    }
}

TEST(Pooling, TokenCountNonIncreasingOnDenseScenes) {
    // the 0.2 -> 0.3 -> 0.4 chain is not nested, but holds on dense
    // surface-like clouds
    Rng rng(13);
    for (int scene = 0; scene < 20; ++scene) {
        Patch3DSet p;
        const std::size_t clusters = 4 + rng.next_below(4);
        const std::size_t per_cluster = 150;
        const std::size_t n = clusters * per_cluster;
        p.features = Matrix(n, 4);
        p.positions = Matrix(n, 3);
        for (double& v : p.features.data()) v = rng.uniform(-1, 1);
        std::size_t row = 0;
        for (std::size_t c = 0; c < clusters; ++c) {
            const Vec3 center{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
            for (std::size_t i = 0; i < per_cluster; ++i, ++row)
                p.positions.set_row3(row, {center[0] + 0.35 * rng.normal(),
                                           center[1] + 0.35 * rng.normal(),
                                           center[2] + 0.35 * rng.normal()});
        }
        p.source.resize(n);
        std::size_t prev = std::numeric_limits<std::size_t>::max();
        for (double size : {0.2, 0.3, 0.4}) {
            const std::size_t count = voxel_pool(p, size).size();
            EXPECT_LE(count, prev) << "scene " << scene << " size " << size;
            prev = count;
        }
    }
}

TEST(Pooling, MassConservationAndPartition) {
    Rng rng(19);
    for (int scene = 0; scene < 10; ++scene) {
        const Patch3DSet p = random_patches(120, 5, rng);
        const PooledTokens out = voxel_pool(p, 0.3);
        std::size_t total = 0;
        std::vector<double> mass(5, 0.0), input_mass(5, 0.0);
        for (std::size_t t = 0; t < out.size(); ++t) {
            total += out.counts[t];
            for (std::size_t c = 0; c < 5; ++c) mass[c] += out.counts[t] * out.features(t, c);
        }
        EXPECT_EQ(total, p.size());  // partition: every token in exactly one group
        for (std::size_t i = 0; i < p.size(); ++i)
            for (std::size_t c = 0; c < 5; ++c) input_mass[c] += p.features(i, c);
        for (std::size_t c = 0; c < 5; ++c)
            EXPECT_NEAR(mass[c], input_mass[c], 1e-6 * std::max(1.0, std::abs(input_mass[c])));
    }
}

TEST(Pooling, VoxelPoolErrors) {
    Rng rng(0);
    const Patch3DSet p = random_patches(5, 3, rng);
    EXPECT_THROW(voxel_pool(p, 0.0), std::invalid_argument);
    Patch3DSet empty;
    empty.features = Matrix(0, 3);
    empty.positions = Matrix(0, 3);
    EXPECT_THROW(voxel_pool(empty, 0.2), std::invalid_argument);
}

TEST(Pooling, FpsPoolSelectsVerbatimRows) {
    Rng rng(3);
    const Patch3DSet p = random_patches(50, 8, rng);
    const PooledTokens out = fps_pool(p, 12, 0);
    ASSERT_EQ(out.size(), 12u);
    for (std::uint32_t c : out.counts) EXPECT_EQ(c, 1u);
    // every output row is bit-identical to some input row
    for (std::size_t t = 0; t < out.size(); ++t) {
        bool found = false;
        for (std::size_t i = 0; i < p.size() && !found; ++i) {
            bool same = true;
            for (std::size_t c = 0; c < 8; ++c)
                if (out.features(t, c) != p.features(i, c)) {
                    same = false;
                    break;
                }
            found = same;
        }
        EXPECT_TRUE(found) << "row " << t;
    }
}

TEST(Pooling, FpsPoolFullCountIsReordering) {
    Rng rng(4);
    const Patch3DSet p = random_patches(20, 4, rng);
    const PooledTokens out = fps_pool(p, 20, 0);
    ASSERT_EQ(out.size(), 20u);
    std::vector<double> in_x, out_x;
    for (std::size_t i = 0; i < 20; ++i) {
        in_x.push_back(p.positions(i, 0));
        out_x.push_back(out.positions(i, 0));
    }
    std::sort(in_x.begin(), in_x.end());
    std::sort(out_x.begin(), out_x.end());
    EXPECT_EQ(in_x, out_x);
}

TEST(Pooling, FpsPoolLineExample) {
    Patch3DSet p;
    p.features = Matrix(3, 2);
    p.positions = Matrix(3, 3);
    for (std::size_t i = 0; i < 3; ++i) p.features(i, 0) = static_cast<double>(i) + 10.0;
    p.positions.set_row3(0, {0, 0, 0});
    p.positions.set_row3(1, {1, 0, 0});
    p.positions.set_row3(2, {10, 0, 0});
    p.source.resize(3);
    const PooledTokens out = fps_pool(p, 2, 0);
    EXPECT_EQ(out.features(0, 0), 10.0);
    EXPECT_EQ(out.features(1, 0), 12.0);
}

TEST(Pooling, FpsPoolCountErrors) {
    Rng rng(0);
    const Patch3DSet p = random_patches(5, 3, rng);
    EXPECT_THROW(fps_pool(p, 6, 0), std::invalid_argument);
    EXPECT_THROW(fps_pool(p, 0, 0), std::invalid_argument);
    // reference token budgets are valid configs
    const Patch3DSet big = random_patches(2048, 3, rng);
    EXPECT_EQ(fps_pool(big, 576, 0).size(), 576u);
    EXPECT_EQ(fps_pool(big, 1024, 0).size(), 1024u);
}

TEST(Pooling, CapSubselectsByFps) {
    Rng rng(8);
    const Patch3DSet p = random_patches(600, 3, rng, 6.0);
    const PooledTokens pooled = voxel_pool(p, 0.05);  // tiny voxels: many tokens
    ASSERT_GT(pooled.size(), 300u);
    const PooledTokens capped = cap_tokens(pooled, 300);
    EXPECT_EQ(capped.size(), 300u);
    const PooledTokens untouched = cap_tokens(pooled, pooled.size());
    EXPECT_EQ(untouched.size(), pooled.size());
}

TEST(Pooling, TokenAccountingPrePool) {
    const auto [w, h] = patch_grid_dims(336, 336, 14);
    const std::size_t per_view = static_cast<std::size_t>(w) * h;
    EXPECT_EQ(per_view, 576u);
    EXPECT_EQ(16 * per_view, 9216u);
    EXPECT_EQ(20 * per_view, 11520u);
}
