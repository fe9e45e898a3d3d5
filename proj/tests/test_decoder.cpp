#include <gtest/gtest.h>

#include "oracles.hpp"
#include "voxlift/decoder.hpp"

using namespace voxlift;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Matrix m(r, c);
    for (double& v : m.data()) v = rng.uniform(lo, hi);
    return m;
}

Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

MlpWeights zero_mlp(std::size_t d_in, std::size_t d_hidden, std::size_t d_out) {
    MlpWeights m;
    m.w1 = Matrix(d_in, d_hidden);
    m.b1.assign(d_hidden, 0.0);
    m.w2 = Matrix(d_hidden, d_out);
    m.b2.assign(d_out, 0.0);
    return m;
}

AttentionWeights identity_attention(std::size_t c) {
    return {identity(c), identity(c), identity(c), identity(c)};
}

DecoderConfig small_config(std::size_t layers, std::size_t queries, std::size_t dim,
                           std::vector<std::size_t> sched) {
    DecoderConfig cfg;
    cfg.layers = layers;
    cfg.queries = queries;
    cfg.dim = dim;
    cfg.knn_schedule = std::move(sched);
    return cfg;
}

}  // namespace

TEST(Decoder, ConfigDefaultsMatchReferenceConstants) {
    const DecoderConfig cfg;
    EXPECT_EQ(cfg.layers, 4u);
    EXPECT_EQ(cfg.queries, 512u);
    EXPECT_EQ(cfg.knn_schedule, (std::vector<std::size_t>{16, 32, 64, 128}));
    EXPECT_NO_THROW(cfg.validate());

    DecoderConfig bad = cfg;
    bad.knn_schedule = {16, 32};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Decoder, InitQueriesZeroValuesAndFpsPositions) {
    Rng rng(0);
    const Matrix patches = random_matrix(64, 3, rng, -2.0, 2.0);
    const DecoderConfig cfg = small_config(1, 8, 4, {4});
    Rng wrng(1);
    const DecoderWeights weights = DecoderWeights::init(cfg, wrng);

    const QueryState state = init_queries(patches, cfg, weights);
    ASSERT_EQ(state.values.rows(), 8u);
    for (double v : state.values.data()) EXPECT_EQ(v, 0.0);

    const std::vector<std::uint32_t> expect = oracles::fps(patches, 8, 0);
    for (std::size_t i = 0; i < 8; ++i)
        for (int a = 0; a < 3; ++a) EXPECT_EQ(state.positions(i, a), patches(expect[i], a));

    // pos_enc comes from the query position MLP
    const Matrix enc = pos_encode(weights.query_pos_mlp, state.positions);
    for (std::size_t i = 0; i < enc.size(); ++i) EXPECT_EQ(state.pos_enc.data()[i], enc.data()[i]);
}

TEST(Decoder, InitQueriesClampsToPatchCount) {
    Rng rng(2);
    const Matrix patches = random_matrix(5, 3, rng);
    const DecoderConfig cfg = small_config(1, 512, 4, {4});
    Rng wrng(1);
    const DecoderWeights weights = DecoderWeights::init(cfg, wrng);
    const QueryState state = init_queries(patches, cfg, weights);
    EXPECT_EQ(state.positions.rows(), 5u);
    // a permutation of all patch positions
    std::vector<double> in_x, out_x;
    for (std::size_t i = 0; i < 5; ++i) {
        in_x.push_back(patches(i, 0));
        out_x.push_back(state.positions(i, 0));
    }
    std::sort(in_x.begin(), in_x.end());
    std::sort(out_x.begin(), out_x.end());
    EXPECT_EQ(in_x, out_x);

    EXPECT_THROW(init_queries(Matrix(0, 3), cfg, weights), std::invalid_argument);
}

TEST(Decoder, CrossAttentionSingleNeighborIdentity) {
    // zero rel-PE, identity projections, one patch: softmax weight 1, so the
    // update is exactly the neighbor's value projection (= its features)
    const std::size_t c = 4;
    QueryState state;
    state.values = Matrix(1, c);
    state.pos_enc = Matrix(1, c);
    state.positions = Matrix(1, 3);
    Rng rng(3);
    for (double& v : state.values.data()) v = rng.uniform(-1, 1);
    const Matrix before = state.values;

    Matrix feats = random_matrix(1, c, rng);
    Matrix pos = random_matrix(1, 3, rng);
    knn_cross_attention(state, feats, pos, 1, identity_attention(c), zero_mlp(3, c, c));
    for (std::size_t t = 0; t < c; ++t)
        EXPECT_NEAR(state.values(0, t), before(0, t) + feats(0, t), 1e-12);
}

TEST(Decoder, CrossAttentionSoftmaxRowsSumToOne) {
    Rng rng(5);
    const std::size_t c = 8, n = 6, m = 30;
    QueryState state;
    state.values = random_matrix(n, c, rng);
    state.pos_enc = random_matrix(n, c, rng);
    state.positions = random_matrix(n, 3, rng);
    const Matrix feats = random_matrix(m, c, rng);
    const Matrix pos = random_matrix(m, 3, rng);
    Rng wrng(6);
    AttentionWeights aw{random_matrix(c, c, wrng), random_matrix(c, c, wrng),
                        random_matrix(c, c, wrng), random_matrix(c, c, wrng)};
    const MlpWeights pe = MlpWeights::init(3, c, c, wrng);

    Matrix attn;
    knn_cross_attention(state, feats, pos, 7, aw, pe, 1, &attn);
    ASSERT_EQ(attn.rows(), n);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < attn.cols(); ++j) sum += attn(i, j);
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Decoder, CrossAttentionKGeqMEqualsDenseOracle) {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t c = 4 + rng.next_below(8);
        const std::size_t n = 1 + rng.next_below(5);
        const std::size_t m = 2 + rng.next_below(16);
        QueryState state;
        state.values = random_matrix(n, c, rng);
        state.pos_enc = random_matrix(n, c, rng);
        state.positions = random_matrix(n, 3, rng);
        const Matrix feats = random_matrix(m, c, rng);
        const Matrix pos = random_matrix(m, 3, rng);
        Rng wrng(100 + trial);
        AttentionWeights aw{random_matrix(c, c, wrng), random_matrix(c, c, wrng),
                            random_matrix(c, c, wrng), random_matrix(c, c, wrng)};
        const MlpWeights pe = MlpWeights::init(3, c, c, wrng);

        const Matrix expect = oracles::dense_cross_attention(state.values, state.pos_enc,
                                                             state.positions, feats, pos, aw, pe);
        knn_cross_attention(state, feats, pos, m + 3, aw, pe);  // k >= m
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < c; ++t)
                EXPECT_NEAR(state.values(i, t), expect(i, t), 1e-6) << "trial " << trial;
    }
}

TEST(Decoder, SelfAttentionSigmaZeroReducesToStandard) {
    Rng rng(9);
    const std::size_t c = 6, n = 5;
    QueryState state;
    state.values = random_matrix(n, c, rng);
    state.pos_enc = random_matrix(n, c, rng);
    state.positions = random_matrix(n, 3, rng, -2.0, 2.0);
    LocationToken loc;
    loc.embedding.resize(c);
    for (double& v : loc.embedding) v = rng.uniform(-1, 1);

    Rng wrng(10);
    AttentionWeights aw{random_matrix(c, c, wrng), random_matrix(c, c, wrng),
                        random_matrix(c, c, wrng), random_matrix(c, c, wrng)};
    std::vector<double> sigma_w(c, 0.0);
    const double sigma_b = -30.0;  // softplus(-30) ~ 9e-14

    // standard attention oracle over the same sequence, no distance bias
    const std::size_t total = n + 1;
    Matrix seq(total, c);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < c; ++t) seq(i, t) = state.values(i, t);
    for (std::size_t t = 0; t < c; ++t) seq(n, t) = loc.embedding[t];
    Matrix q(total, c), k(total, c), v(total, c);
    for (std::size_t i = 0; i < total; ++i)
        for (std::size_t t = 0; t < c; ++t)
            for (std::size_t r = 0; r < c; ++r) {
                q(i, t) += seq(i, r) * aw.wq(r, t);
                k(i, t) += seq(i, r) * aw.wk(r, t);
                v(i, t) += seq(i, r) * aw.wv(r, t);
            }
    Matrix expect = seq;
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    for (std::size_t i = 0; i < total; ++i) {
        std::vector<double> logits(total);
        double mx = -1e300;
        for (std::size_t j = 0; j < total; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < c; ++t) s += q(i, t) * k(j, t);
            logits[j] = s * scale;
            mx = std::max(mx, logits[j]);
        }
        double denom = 0.0;
        for (double& l : logits) {
            l = std::exp(l - mx);
            denom += l;
        }
        std::vector<double> ctx(c, 0.0);
        for (std::size_t j = 0; j < total; ++j)
            for (std::size_t t = 0; t < c; ++t) ctx[t] += (logits[j] / denom) * v(j, t);
        for (std::size_t r = 0; r < c; ++r)
            for (std::size_t t = 0; t < c; ++t) expect(i, t) += ctx[r] * aw.wo(r, t);
    }

    distance_adaptive_self_attention(state, loc, aw, sigma_w, sigma_b);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < c; ++t) EXPECT_NEAR(state.values(i, t), expect(i, t), 1e-6);
    for (std::size_t t = 0; t < c; ++t) EXPECT_NEAR(loc.embedding[t], expect(n, t), 1e-6);
}

TEST(Decoder, SelfAttentionIdenticalPositionsIgnoreSigma) {
    Rng rng(11);
    const std::size_t c = 4, n = 3;
    QueryState a;
    a.values = random_matrix(n, c, rng);
    a.pos_enc = Matrix(n, c);
    a.positions = Matrix(n, 3);  // all at the origin: D = 0 everywhere
    QueryState b = a;
    LocationToken loc_a;
    loc_a.embedding.assign(c, 0.25);
    LocationToken loc_b = loc_a;

    Rng wrng(12);
    AttentionWeights aw{random_matrix(c, c, wrng), random_matrix(c, c, wrng),
                        random_matrix(c, c, wrng), random_matrix(c, c, wrng)};
    std::vector<double> sigma_small(c, 0.0), sigma_large(c, 0.0);

    distance_adaptive_self_attention(a, loc_a, aw, sigma_small, -30.0);
    distance_adaptive_self_attention(b, loc_b, aw, sigma_large, 50.0);  // huge sigma
    for (std::size_t i = 0; i < a.values.size(); ++i)
        EXPECT_NEAR(a.values.data()[i], b.values.data()[i], 1e-9);
}

TEST(Decoder, SelfAttentionThreeQueryScalarOracle) {
    // 3 queries on a line at x = 0, 1, 2, identity projections, sigma = 1;
    // expected values computed with explicit scalar arithmetic
    const std::size_t c = 2, n = 3;
    QueryState state;
    state.values = Matrix(n, c);
    state.values(0, 0) = 1.0;
    state.values(1, 1) = 2.0;
    state.values(2, 0) = -1.0;
    state.values(2, 1) = 0.5;
    state.pos_enc = Matrix(n, c);
    state.positions = Matrix(n, 3);
    state.positions(1, 0) = 1.0;
    state.positions(2, 0) = 2.0;
    LocationToken loc;
    loc.embedding = {0.5, -1.0};

    const std::vector<double> sigma_w(c, 0.0);
    const double sigma_b = std::log(std::exp(1.0) - 1.0);  // softplus^{-1}(1)
    const AttentionWeights aw = identity_attention(c);

    // oracle: rows over the 4-token sequence
    const double seq[4][2] = {{1.0, 0.0}, {0.0, 2.0}, {-1.0, 0.5}, {0.5, -1.0}};
    const double dist[4][4] = {{0, 1, 2, 0}, {1, 0, 1, 0}, {2, 1, 0, 0}, {0, 0, 0, 0}};
    const double scale = 1.0 / std::sqrt(2.0);
    double expect[4][2];
    for (int i = 0; i < 4; ++i) {
        double logits[4], mx = -1e300;
        for (int j = 0; j < 4; ++j) {
            const double dotqk = seq[i][0] * seq[j][0] + seq[i][1] * seq[j][1];
            logits[j] = dotqk * scale - 1.0 * dist[i][j];
            mx = std::max(mx, logits[j]);
        }
        double denom = 0.0;
        for (double& l : logits) {
            l = std::exp(l - mx);
            denom += l;
        }
        for (int t = 0; t < 2; ++t) {
            double ctx = 0.0;
            for (int j = 0; j < 4; ++j) ctx += (logits[j] / denom) * seq[j][t];
            expect[i][t] = seq[i][t] + ctx;
        }
    }

    distance_adaptive_self_attention(state, loc, aw, sigma_w, sigma_b);
    for (int i = 0; i < 3; ++i)
        for (int t = 0; t < 2; ++t) EXPECT_NEAR(state.values(i, t), expect[i][t], 1e-12);
    for (int t = 0; t < 2; ++t) EXPECT_NEAR(loc.embedding[t], expect[3][t], 1e-12);
}

TEST(Decoder, LocTokenRowsAndColumnsCarryZeroBias) {
    Rng rng(13);
    const std::size_t c = 5, n = 4;
    const Matrix values = random_matrix(n, c, rng);
    const Matrix positions = random_matrix(n, 3, rng, -3.0, 3.0);
    std::vector<double> loc(c);
    for (double& v : loc) v = rng.uniform(-1, 1);

    Rng wrng(14);
    AttentionWeights aw{random_matrix(c, c, wrng), random_matrix(c, c, wrng),
                        random_matrix(c, c, wrng), random_matrix(c, c, wrng)};
    std::vector<double> sigma_w(c);
    for (double& v : sigma_w) v = wrng.uniform(-1, 1);
    const double sigma_b = 0.7;

    const Matrix biased = distance_adaptive_logits(values, positions, loc, aw, sigma_w, sigma_b);
    const Matrix unbiased =
        distance_adaptive_logits(values, positions, loc, aw, std::vector<double>(c, 0.0), -1e9);

    // rows and columns touching the loc token (index n) are bias-free
    for (std::size_t j = 0; j <= n; ++j) EXPECT_EQ(biased(n, j), unbiased(n, j));
    for (std::size_t i = 0; i <= n; ++i) EXPECT_EQ(biased(i, n), unbiased(i, n));
    // query-query pairs at distinct positions do carry bias
    EXPECT_NE(biased(0, 1), unbiased(0, 1));
}

TEST(Decoder, SelfAttentionLogitsRigidInvariant) {
    Rng rng(15);
    const std::size_t c = 4, n = 5;
    const Matrix values = random_matrix(n, c, rng);
    Matrix positions = random_matrix(n, 3, rng);
    std::vector<double> loc(c, 0.3);
    Rng wrng(16);
    AttentionWeights aw{random_matrix(c, c, wrng), random_matrix(c, c, wrng),
                        random_matrix(c, c, wrng), random_matrix(c, c, wrng)};
    std::vector<double> sigma_w(c, 0.2);

    const Matrix base = distance_adaptive_logits(values, positions, loc, aw, sigma_w, 0.1);

    // rigid transform: rotate 90 degrees about z then translate
    Matrix moved(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
        moved(i, 0) = -positions(i, 1) + 5.0;
        moved(i, 1) = positions(i, 0) - 2.0;
        moved(i, 2) = positions(i, 2) + 0.75;
    }
    const Matrix transformed = distance_adaptive_logits(values, moved, loc, aw, sigma_w, 0.1);
    for (std::size_t i = 0; i < base.size(); ++i)
        EXPECT_NEAR(base.data()[i], transformed.data()[i], 1e-9);
}

TEST(Decoder, BoxHeadZeroWeights) {
    const std::size_t c = 4;
    const MlpWeights head = zero_mlp(c, c, 6);
    Matrix values(2, c);
    Matrix positions(2, 3);
    positions.set_row3(0, {1.0, -2.0, 0.5});
    positions.set_row3(1, {0.0, 3.0, -1.0});
    const std::vector<Box3D> boxes = box_head_forward(values, positions, head);
    const double base_size = softplus(0.0) + 1e-4;  // log(2) + 1e-4
    for (std::size_t i = 0; i < 2; ++i) {
        for (int a = 0; a < 3; ++a) {
            EXPECT_EQ(boxes[i].center[a], positions(i, a));
            EXPECT_NEAR(boxes[i].size[a], base_size, 1e-15);
            EXPECT_NEAR(boxes[i].size[a], 0.6933, 5e-4);
        }
    }
}

TEST(Decoder, BoxHeadSizeMonotoneInRawLogit) {
    // bumping one raw size logit through b2 strictly increases that size
    const std::size_t c = 3;
    MlpWeights head = zero_mlp(c, c, 6);
    Matrix values(1, c);
    Matrix positions(1, 3);
    double prev = 0.0;
    for (int step = 0; step < 5; ++step) {
        head.b2[3] = -2.0 + step;
        const std::vector<Box3D> boxes = box_head_forward(values, positions, head);
        if (step > 0) {
            EXPECT_GT(boxes[0].size[0], prev);
        }
        prev = boxes[0].size[0];
        EXPECT_GT(boxes[0].size[0], 0.0);
    }
}

TEST(Decoder, BoxHeadMatchesMlpOracle) {
    Rng rng(0);
    const std::size_t c = 8;
    Rng wrng(0);
    const MlpWeights head = MlpWeights::init(c, c, 6, wrng);
    const Matrix values = random_matrix(1, c, rng);
    Matrix positions(1, 3);
    positions.set_row3(0, {0.5, 0.5, 0.5});
    const std::vector<Box3D> boxes = box_head_forward(values, positions, head);
    std::vector<double> x(values.row(0), values.row(0) + c);
    const std::vector<double> raw = oracles::mlp_forward(head.w1, head.b1, head.w2, head.b2, x);
    for (int a = 0; a < 3; ++a) {
        EXPECT_NEAR(boxes[0].center[a], 0.5 + raw[a], 1e-14);
        EXPECT_NEAR(boxes[0].size[a], softplus(raw[3 + a]) + 1e-4, 1e-14);
    }
}

TEST(Decoder, BoxSizesAlwaysPositiveForRandomWeights) {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        Rng wrng(trial);
        const std::size_t c = 6;
        const MlpWeights head = MlpWeights::init(c, c, 6, wrng);
        const Matrix values = random_matrix(4, c, rng, -10.0, 10.0);
        const Matrix positions = random_matrix(4, 3, rng);
        for (const Box3D& b : box_head_forward(values, positions, head))
            for (int a = 0; a < 3; ++a) EXPECT_GT(b.size[a], 0.0);
    }
}

TEST(Decoder, GroundingForwardZeroLayers) {
    Rng rng(23);
    const Matrix feats = random_matrix(10, 4, rng);
    const Matrix pos = random_matrix(10, 3, rng);
    DecoderConfig cfg = small_config(0, 5, 4, {});
    Rng wrng(2);
    const DecoderWeights weights = DecoderWeights::init(cfg, wrng);
    LocationToken loc;
    loc.embedding.assign(4, 0.5);

    const GroundingOutput out = grounding_forward(feats, pos, loc, cfg, weights);
    EXPECT_TRUE(out.boxes_per_layer.empty());
    ASSERT_EQ(out.scores.size(), 5u);
    for (double s : out.scores) EXPECT_EQ(s, 0.0);  // zero-value queries
    ASSERT_EQ(out.selected.size(), 1u);             // argmax, single-target default
    EXPECT_EQ(out.selected[0], 0u);
}

TEST(Decoder, GroundingForwardDeterministicBitExact) {
    Rng rng(29);
    const Matrix feats = random_matrix(30, 8, rng);
    const Matrix pos = random_matrix(30, 3, rng);
    DecoderConfig cfg = small_config(2, 6, 8, {4, 8});
    Rng wrng(3);
    const DecoderWeights weights = DecoderWeights::init(cfg, wrng);
    LocationToken loc;
    loc.embedding.assign(8, -0.25);

    const GroundingOutput a = grounding_forward(feats, pos, loc, cfg, weights, 1);
    const GroundingOutput b = grounding_forward(feats, pos, loc, cfg, weights, 8);
    ASSERT_EQ(a.scores.size(), b.scores.size());
    for (std::size_t i = 0; i < a.scores.size(); ++i) EXPECT_EQ(a.scores[i], b.scores[i]);
    ASSERT_EQ(a.boxes_per_layer.size(), b.boxes_per_layer.size());
    for (std::size_t l = 0; l < a.boxes_per_layer.size(); ++l)
        for (std::size_t i = 0; i < a.boxes_per_layer[l].size(); ++i)
            for (int ax = 0; ax < 3; ++ax) {
                EXPECT_EQ(a.boxes_per_layer[l][i].center[ax], b.boxes_per_layer[l][i].center[ax]);
                EXPECT_EQ(a.boxes_per_layer[l][i].size[ax], b.boxes_per_layer[l][i].size[ax]);
            }
    EXPECT_EQ(a.selected, b.selected);
}

// straight-line reference implementation of the full forward pass, written
// against the oracles only
namespace reference {

GroundingOutput forward(const Matrix& feats, const Matrix& pos, const LocationToken& loc_in,
                        const DecoderConfig& cfg, const DecoderWeights& w) {
    const std::size_t c = cfg.dim;
    const std::size_t n = std::min<std::size_t>(cfg.queries, pos.rows());
    const std::vector<std::uint32_t> picks = oracles::fps(pos, n, 0);

    Matrix qpos(n, 3);
    for (std::size_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) qpos(i, a) = pos(picks[i], a);
    Matrix values(n, c), pos_enc(n, c);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double> e = oracles::mlp_forward(
            w.query_pos_mlp.w1, w.query_pos_mlp.b1, w.query_pos_mlp.w2, w.query_pos_mlp.b2,
            {qpos(i, 0), qpos(i, 1), qpos(i, 2)});
        for (std::size_t t = 0; t < c; ++t) pos_enc(i, t) = e[t];
    }
    std::vector<double> loc = loc_in.embedding;

    GroundingOutput out;
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const AttentionWeights& aw = w.layers[l];
        // k-NN cross attention
        const auto [nidx, ndist] = oracles::knn(qpos, pos, cfg.knn_schedule[l]);
        const std::size_t kk = std::min(cfg.knn_schedule[l], pos.rows());
        Matrix next = values;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> qin(c), qbase(c, 0.0);
            for (std::size_t t = 0; t < c; ++t) qin[t] = values(i, t) + pos_enc(i, t);
            for (std::size_t r = 0; r < c; ++r)
                for (std::size_t t = 0; t < c; ++t) qbase[t] += qin[r] * aw.wq(r, t);
            std::vector<double> logits(kk);
            std::vector<std::vector<double>> vproj(kk, std::vector<double>(c, 0.0));
            for (std::size_t jj = 0; jj < kk; ++jj) {
                const std::uint32_t j = nidx[i * kk + jj];
                const std::vector<double> pe = oracles::mlp_forward(
                    w.rel_pe_mlp.w1, w.rel_pe_mlp.b1, w.rel_pe_mlp.w2, w.rel_pe_mlp.b2,
                    {pos(j, 0) - qpos(i, 0), pos(j, 1) - qpos(i, 1), pos(j, 2) - qpos(i, 2)});
                std::vector<double> kproj(c, 0.0);
                for (std::size_t r = 0; r < c; ++r)
                    for (std::size_t t = 0; t < c; ++t) {
                        kproj[t] += feats(j, r) * aw.wk(r, t);
                        vproj[jj][t] += feats(j, r) * aw.wv(r, t);
                    }
                double s = 0.0;
                for (std::size_t t = 0; t < c; ++t) s += (qbase[t] + pe[t]) * (kproj[t] + pe[t]);
                logits[jj] = s * scale;
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double denom = 0.0;
            for (double& v : logits) {
                v = std::exp(v - mx);
                denom += v;
            }
            std::vector<double> ctx(c, 0.0);
            for (std::size_t jj = 0; jj < kk; ++jj)
                for (std::size_t t = 0; t < c; ++t) ctx[t] += (logits[jj] / denom) * vproj[jj][t];
            for (std::size_t r = 0; r < c; ++r)
                for (std::size_t t = 0; t < c; ++t) next(i, t) += ctx[r] * aw.wo(r, t);
        }
        values = next;

        // distance-adaptive self attention over (queries ++ loc)
        const std::size_t total = n + 1;
        Matrix seq(total, c);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < c; ++t) seq(i, t) = values(i, t);
        for (std::size_t t = 0; t < c; ++t) seq(n, t) = loc[t];
        Matrix q(total, c), km(total, c), vm(total, c);
        std::vector<double> sigma(total);
        for (std::size_t i = 0; i < total; ++i) {
            double s = w.sigma_b;
            for (std::size_t t = 0; t < c; ++t) s += seq(i, t) * w.sigma_w[t];
            sigma[i] = softplus(s);
            for (std::size_t r = 0; r < c; ++r)
                for (std::size_t t = 0; t < c; ++t) {
                    q(i, t) += seq(i, r) * aw.wq(r, t);
                    km(i, t) += seq(i, r) * aw.wk(r, t);
                    vm(i, t) += seq(i, r) * aw.wv(r, t);
                }
        }
        Matrix updated = seq;
        for (std::size_t i = 0; i < total; ++i) {
            std::vector<double> logits(total);
            double mx = -1e300;
            for (std::size_t j = 0; j < total; ++j) {
                double d = 0.0;
                if (i < n && j < n) {
                    double d2 = 0.0;
                    for (int a = 0; a < 3; ++a) {
                        const double dd = qpos(i, a) - qpos(j, a);
                        d2 += dd * dd;
                    }
                    d = std::sqrt(d2);
                }
                double s = 0.0;
                for (std::size_t t = 0; t < c; ++t) s += q(i, t) * km(j, t);
                logits[j] = s * scale - sigma[i] * d;
                mx = std::max(mx, logits[j]);
            }
            double denom = 0.0;
            for (double& v : logits) {
                v = std::exp(v - mx);
                denom += v;
            }
            std::vector<double> ctx(c, 0.0);
            for (std::size_t j = 0; j < total; ++j)
                for (std::size_t t = 0; t < c; ++t) ctx[t] += (logits[j] / denom) * vm(j, t);
            for (std::size_t r = 0; r < c; ++r)
                for (std::size_t t = 0; t < c; ++t) updated(i, t) += ctx[r] * aw.wo(r, t);
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < c; ++t) values(i, t) = updated(i, t);
        for (std::size_t t = 0; t < c; ++t) loc[t] = updated(n, t);

        // per-layer boxes
        std::vector<Box3D> boxes(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> x(c);
            for (std::size_t t = 0; t < c; ++t) x[t] = values(i, t);
            const std::vector<double> raw =
                oracles::mlp_forward(w.box_head.w1, w.box_head.b1, w.box_head.w2, w.box_head.b2, x);
            for (int a = 0; a < 3; ++a) {
                boxes[i].center[a] = qpos(i, a) + raw[a];
                boxes[i].size[a] = softplus(raw[3 + a]) + 1e-4;
            }
        }
        out.boxes_per_layer.push_back(std::move(boxes));
    }

    out.scores.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double qq = 0.0, ll = 0.0, ql = 0.0;
        for (std::size_t t = 0; t < c; ++t) {
            qq += values(i, t) * values(i, t);
            ll += loc[t] * loc[t];
            ql += values(i, t) * loc[t];
        }
        out.scores[i] = (qq == 0.0 || ll == 0.0) ? 0.0 : ql / (std::sqrt(qq) * std::sqrt(ll));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (out.scores[i] > out.scores[best]) best = i;
    out.selected.push_back(static_cast<std::uint32_t>(best));
    return out;
}

}  // namespace reference

TEST(Decoder, GroundingForwardMatchesReferenceImplementation) {
    Rng rng(31);
    const Matrix feats = random_matrix(20, 6, rng);
    const Matrix pos = random_matrix(20, 3, rng, -2.0, 2.0);
    DecoderConfig cfg = small_config(2, 5, 6, {4, 8});
    Rng wrng(5);
    const DecoderWeights weights = DecoderWeights::init(cfg, wrng);
    LocationToken loc;
    loc.embedding.resize(6);
    for (double& v : loc.embedding) v = rng.uniform(-1, 1);

    const GroundingOutput got = grounding_forward(feats, pos, loc, cfg, weights);
    const GroundingOutput expect = reference::forward(feats, pos, loc, cfg, weights);

    ASSERT_EQ(got.boxes_per_layer.size(), expect.boxes_per_layer.size());
    for (std::size_t l = 0; l < got.boxes_per_layer.size(); ++l)
        for (std::size_t i = 0; i < got.boxes_per_layer[l].size(); ++i)
            for (int a = 0; a < 3; ++a) {
                EXPECT_NEAR(got.boxes_per_layer[l][i].center[a],
                            expect.boxes_per_layer[l][i].center[a], 1e-9);
                EXPECT_NEAR(got.boxes_per_layer[l][i].size[a], expect.boxes_per_layer[l][i].size[a],
                            1e-9);
            }
    ASSERT_EQ(got.scores.size(), expect.scores.size());
    for (std::size_t i = 0; i < got.scores.size(); ++i)
        EXPECT_NEAR(got.scores[i], expect.scores[i], 1e-9);
    EXPECT_EQ(got.selected, expect.selected);
}

TEST(Decoder, MultiTargetSelectionUsesThreshold) {
    Rng rng(37);
    const Matrix feats = random_matrix(16, 4, rng);
    const Matrix pos = random_matrix(16, 3, rng);
    DecoderConfig cfg = small_config(1, 6, 4, {4});
    cfg.multi_target = true;
    cfg.selection_threshold = 0.0;  // every non-negative score selects
    Rng wrng(7);
    const DecoderWeights weights = DecoderWeights::init(cfg, wrng);
    LocationToken loc;
    loc.embedding.assign(4, 0.5);

    const GroundingOutput out = grounding_forward(feats, pos, loc, cfg, weights);
    std::vector<std::uint32_t> expect;
    for (std::size_t i = 0; i < out.scores.size(); ++i)
        if (out.scores[i] >= 0.0) expect.push_back(static_cast<std::uint32_t>(i));
    EXPECT_EQ(out.selected, expect);

    DecoderConfig strict = cfg;
    strict.selection_threshold = 1.0;  // cosine rarely reaches exactly 1
    const GroundingOutput none = grounding_forward(feats, pos, loc, strict, weights);
    EXPECT_TRUE(none.selected.empty());
}

TEST(Decoder, WeightValidation) {
    DecoderConfig cfg = small_config(1, 4, 4, {2});
    Rng rng(0);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    EXPECT_NO_THROW(w.validate(cfg));
    DecoderWeights bad = w;
    bad.layers[0].wq = Matrix(3, 4);
    EXPECT_THROW(bad.validate(cfg), std::invalid_argument);
    bad = w;
    bad.sigma_w.resize(2);
    EXPECT_THROW(bad.validate(cfg), std::invalid_argument);
}
