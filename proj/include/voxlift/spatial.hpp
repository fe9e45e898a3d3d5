#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <unordered_map>

#include "voxlift/common.hpp"

namespace voxlift {

struct VoxelKey {
    std::int64_t ix = 0, iy = 0, iz = 0;

    bool operator==(const VoxelKey& o) const { return ix == o.ix && iy == o.iy && iz == o.iz; }
};

struct VoxelKeyHash {
    std::size_t operator()(const VoxelKey& k) const noexcept {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (std::int64_t v : {k.ix, k.iy, k.iz}) {
            h ^= static_cast<std::uint64_t>(v);
            h *= 0x100000001b3ULL;
        }
        return static_cast<std::size_t>(h);
    }
};

/// Floor division per axis; negative coordinates floor toward -inf, cells are
/// closed on the left, open on the right.
inline VoxelKey voxel_key(const Vec3& p, double voxel_size) {
    if (!(voxel_size > 0.0)) throw std::invalid_argument("voxel_key: voxel_size must be > 0");
    return {static_cast<std::int64_t>(std::floor(p[0] / voxel_size)),
            static_cast<std::int64_t>(std::floor(p[1] / voxel_size)),
            static_cast<std::int64_t>(std::floor(p[2] / voxel_size))};
}

/// Exact k nearest neighbors per query row, distances ascending, ties broken
/// by smaller point index. Rows have min(k, m) columns.
struct KnnResult {
    std::size_t query_count = 0;
    std::size_t k = 0;                   // effective column count = min(k, m)
    std::vector<std::uint32_t> indices;  // query_count * k
    std::vector<double> distances;       // meters, same layout

    const std::uint32_t* row_indices(std::size_t q) const { return indices.data() + q * k; }
    const double* row_distances(std::size_t q) const { return distances.data() + q * k; }
};

namespace detail {

// (squared distance, index) candidate with the brute-force ordering
struct Cand {
    double d2;
    std::uint32_t idx;
    bool operator<(const Cand& o) const { return d2 != o.d2 ? d2 < o.d2 : idx < o.idx; }
};

inline void select_k_into(std::vector<Cand>& cands, std::size_t k, KnnResult& out, std::size_t q) {
    if (cands.size() > k)
        std::partial_sort(cands.begin(), cands.begin() + k, cands.end());
    else
        std::sort(cands.begin(), cands.end());
    for (std::size_t j = 0; j < k; ++j) {
        out.indices[q * k + j] = cands[j].idx;
        out.distances[q * k + j] = std::sqrt(cands[j].d2);
    }
}

}  // namespace detail

inline KnnResult knn_bruteforce(const Matrix& query_pos, const Matrix& point_pos, std::size_t k,
                                int threads = 1) {
    if (k < 1) throw std::invalid_argument("knn: k must be >= 1");
    if (point_pos.rows() == 0) throw std::invalid_argument("knn: empty point set");
    const std::size_t m = point_pos.rows();
    const std::size_t q = query_pos.rows();
    const std::size_t kk = std::min(k, m);

    KnnResult out;
    out.query_count = q;
    out.k = kk;
    out.indices.resize(q * kk);
    out.distances.resize(q * kk);

    parallel_for(q, threads, [&](std::size_t qb, std::size_t qe) {
        std::vector<detail::Cand> cands(m);
        for (std::size_t qi = qb; qi < qe; ++qi) {
            const Vec3 p = query_pos.row3(qi);
            for (std::size_t i = 0; i < m; ++i)
                cands[i] = {squared_distance(p, point_pos.row3(i)), static_cast<std::uint32_t>(i)};
            detail::select_k_into(cands, kk, out, qi);
        }
    });
    return out;
}

/// Uniform-hash-grid accelerated exact k-NN. Candidates are gathered shell by
/// shell in Chebyshev rings around the query cell and the scan stops only once
/// no farther cell can hold a point at distance <= the current k-th best, so
/// indices and distances match knn_bruteforce exactly, ties included.
inline KnnResult knn_grid(const Matrix& query_pos, const Matrix& point_pos, std::size_t k,
                          int threads = 1) {
    if (k < 1) throw std::invalid_argument("knn: k must be >= 1");
    const std::size_t m = point_pos.rows();
    if (m == 0) throw std::invalid_argument("knn: empty point set");
    const std::size_t q = query_pos.rows();
    const std::size_t kk = std::min(k, m);

    // cell size from the bounding-box volume; degenerate extents fall back to
    // brute force (the grid would collapse to a line of cells)
    Vec3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
            std::numeric_limits<double>::infinity()};
    Vec3 hi{-lo[0], -lo[1], -lo[2]};
    for (std::size_t i = 0; i < m; ++i) {
        const Vec3 p = point_pos.row3(i);
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    }
    const double vol = (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
    if (!(vol > 0.0) || m < 16) return knn_bruteforce(query_pos, point_pos, k, threads);
    const double cell = std::cbrt(vol / static_cast<double>(m));

    std::unordered_map<VoxelKey, std::vector<std::uint32_t>, VoxelKeyHash> grid;
    grid.reserve(m);
    for (std::size_t i = 0; i < m; ++i)
        grid[voxel_key(point_pos.row3(i), cell)].push_back(static_cast<std::uint32_t>(i));

    KnnResult out;
    out.query_count = q;
    out.k = kk;
    out.indices.resize(q * kk);
    out.distances.resize(q * kk);

    parallel_for(q, threads, [&](std::size_t qb, std::size_t qe) {
        std::vector<detail::Cand> cands;
        for (std::size_t qi = qb; qi < qe; ++qi) {
            const Vec3 p = query_pos.row3(qi);
            const VoxelKey ck = voxel_key(p, cell);
            cands.clear();

            std::size_t ring = 0;
            double kth_d2 = std::numeric_limits<double>::infinity();
            while (true) {
                // all cells at Chebyshev distance == ring
                const std::int64_t r = static_cast<std::int64_t>(ring);
                for (std::int64_t dx = -r; dx <= r; ++dx) {
                    for (std::int64_t dy = -r; dy <= r; ++dy) {
                        for (std::int64_t dz = -r; dz <= r; ++dz) {
                            if (std::max({std::llabs(dx), std::llabs(dy), std::llabs(dz)}) != r) continue;
                            const auto it = grid.find(VoxelKey{ck.ix + dx, ck.iy + dy, ck.iz + dz});
                            if (it == grid.end()) continue;
                            for (std::uint32_t idx : it->second)
                                cands.push_back({squared_distance(p, point_pos.row3(idx)), idx});
                        }
                    }
                }
                if (cands.size() >= kk) {
                    std::nth_element(cands.begin(), cands.begin() + (kk - 1), cands.end());
                    kth_d2 = cands[kk - 1].d2;
                    // points in ring r+1 lie strictly beyond ring*cell from p;
                    // the 1e-9 slack keeps rounding at cell boundaries from
                    // stopping a scan brute force would have continued
                    const double bound = static_cast<double>(ring) * cell;
                    if (bound * bound * (1.0 - 1e-9) > kth_d2) break;
                }
                ++ring;
                if (ring > 1 && cands.size() == m) break;  // grid exhausted
            }
            detail::select_k_into(cands, kk, out, qi);
        }
    });
    return out;
}

inline KnnResult knn(const Matrix& query_pos, const Matrix& point_pos, std::size_t k, int threads = 1) {
    if (point_pos.rows() >= 256) return knn_grid(query_pos, point_pos, k, threads);
    return knn_bruteforce(query_pos, point_pos, k, threads);
}

/// Greedy max-min farthest point sampling. The first pick is seed_index; each
/// later pick maximizes the distance to the selected set, ties broken by
/// smaller index. Returns indices in selection order.
inline std::vector<std::uint32_t> fps(const Matrix& points, std::size_t count, std::size_t seed_index) {
    const std::size_t m = points.rows();
    if (count < 1 || count > m) throw std::invalid_argument("fps: need 1 <= count <= point count");
    if (seed_index >= m) throw std::invalid_argument("fps: seed_index out of range");

    std::vector<std::uint32_t> picks;
    picks.reserve(count);
    picks.push_back(static_cast<std::uint32_t>(seed_index));

    std::vector<double> min_d2(m);
    std::vector<std::uint8_t> selected(m, 0);
    selected[seed_index] = 1;
    for (std::size_t i = 0; i < m; ++i)
        min_d2[i] = squared_distance(points.row3(i), points.row3(seed_index));

    while (picks.size() < count) {
        std::size_t best = m;
        double best_d2 = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (selected[i]) continue;  // duplicates can drive min_d2 to 0 everywhere
            if (min_d2[i] > best_d2) {  // strict: ties keep the smaller index
                best_d2 = min_d2[i];
                best = i;
            }
        }
        picks.push_back(static_cast<std::uint32_t>(best));
        selected[best] = 1;
        const Vec3 bp = points.row3(best);
        for (std::size_t i = 0; i < m; ++i)
            min_d2[i] = std::min(min_d2[i], squared_distance(points.row3(i), bp));
    }
    return picks;
}

}  // namespace voxlift
