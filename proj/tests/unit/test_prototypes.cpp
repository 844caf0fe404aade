// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "lpn/encoder.hpp"
#include "lpn/gradcheck.hpp"
#include "lpn/prototypes.hpp"
#include "lpn/synthetic.hpp"

using namespace lpn;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng) {
    Tensor t({r, c});
    for (double& x : t.data()) x = rng.normal();
    return t;
}

struct Stacked {
    std::vector<ad::Var> supports;
    std::vector<ad::Var> labels;
};

// Encodes an episode's supports (one K x d block per class) and label descriptions.
Stacked encode_episode(ad::Graph& g, const encoder::EncoderVars& vars, const Dataset& ds, const Episode& ep) {
    Stacked out;
    for (std::size_t i = 0; i < ep.n_way(); ++i) {
        std::vector<ad::Var> rows;
        for (auto s : ep.support[i]) rows.push_back(encoder::encode(vars, g.constant(ds.sentences[s].tokens)).embedding);
        out.supports.push_back(rows.size() == 1 ? rows[0] : ad::concat(rows, 0));
        out.labels.push_back(encoder::encode_label(vars, ds.labels[ep.class_ids[i]]));
    }
    return out;
}

Tensor lpn_prototypes(const SharedSupportEpisode& sh, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = sh.data.d;
    const auto enc = encoder::EncoderParams::init(d, 4, 2, rng);
    const auto bil = proto::BilinearParams::init(d, 2, rng);
    ad::Graph g;
    encoder::EncoderVars vars(g.constant(enc.f1), g.constant(enc.f2), g.constant(enc.f3));
    Stacked st = encode_episode(g, vars, sh.data, sh.episode);
    ad::Var alpha = proto::attention_logits(st.supports, st.labels, g.constant(bil.u), g.constant(bil.v));
    return proto::prototypes(st.supports, proto::shot_weights(alpha)).value();
}

double row_distance(const Tensor& p, std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t k = 0; k < p.cols(); ++k) s += (p(a, k) - p(b, k)) * (p(a, k) - p(b, k));
    return s;
}

} // namespace

TEST(Prototypes, IdentityBilinearReducesToDotProduct) {
    ad::Graph g;
    std::vector<ad::Var> s{g.constant(Tensor::row({1, 2}))};
    std::vector<ad::Var> e{g.constant(Tensor::row({3, 4}))};
    const Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
    EXPECT_DOUBLE_EQ(proto::attention_logits(s, e, g.constant(eye), g.constant(eye)).value()[0], 11.0);
    const Tensor zero({2, 2});
    EXPECT_EQ(proto::attention_logits(s, e, g.constant(zero), g.constant(eye)).value()[0], 0.0);
}

TEST(Prototypes, LowRankMatchesFullBilinearForm) {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 6, k = 2, n = 3, K = 4;
        const Tensor u = random_tensor(d, k, rng), v = random_tensor(d, k, rng);
        Tensor w({d, d});
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b)
                for (std::size_t r = 0; r < k; ++r) w(a, b) += u(a, r) * v(b, r);
        ad::Graph g;
        std::vector<Tensor> sup, lab;
        std::vector<ad::Var> sv, lv;
        for (std::size_t i = 0; i < n; ++i) {
            sup.push_back(random_tensor(K, d, rng));
            lab.push_back(random_tensor(1, d, rng));
            sv.push_back(g.constant(sup.back()));
            lv.push_back(g.constant(lab.back()));
        }
        const Tensor alpha = proto::attention_logits(sv, lv, g.constant(u), g.constant(v)).value();
        ASSERT_EQ(alpha.shape(), (Shape{n, K}));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < K; ++j) {
                double full = 0;
                for (std::size_t a = 0; a < d; ++a)
                    for (std::size_t b = 0; b < d; ++b) full += sup[i](j, a) * w(a, b) * lab[i](0, b);
                EXPECT_NEAR(alpha(i, j), full, 1e-6);
            }
    }
}

TEST(Prototypes, ShotWeights) {
    ad::Graph g;
    const Tensor b = proto::shot_weights(g.constant(Tensor::from_rows({{0, 0}, {std::log(1.0), std::log(3.0)}}))).value();
    EXPECT_DOUBLE_EQ(b(0, 0), 0.5);
    EXPECT_NEAR(b(1, 0), 0.25, 1e-15);
    EXPECT_NEAR(b(1, 1), 0.75, 1e-15);
    Rng rng(1);
    const Tensor a = random_tensor(3, 5, rng);
    Tensor shifted = a;
    for (std::size_t j = 0; j < 5; ++j) shifted(1, j) += 7.0;
    const Tensor b1 = proto::shot_weights(g.constant(a)).value(), b2 = proto::shot_weights(g.constant(shifted)).value();
    for (std::size_t i = 0; i < b1.size(); ++i) EXPECT_NEAR(b1[i], b2[i], 1e-12);
}

TEST(Prototypes, WeightedCombination) {
    ad::Graph g;
    std::vector<ad::Var> s{g.constant(Tensor::from_rows({{1, 0}, {0, 1}}))};
    Tensor p = proto::prototypes(s, g.constant(Tensor::row({0.5, 0.5}))).value();
    EXPECT_EQ(p(0, 0), 0.5);
    EXPECT_EQ(p(0, 1), 0.5);
    p = proto::prototypes(s, g.constant(Tensor::row({1, 0}))).value();
    EXPECT_EQ(p(0, 0), 1.0);
    EXPECT_EQ(p(0, 1), 0.0);
    EXPECT_THROW(proto::prototypes(s, g.constant(Tensor::row({1, 0, 0}))), ShapeError);
}

TEST(Prototypes, MeanPrototypesAreTheUniformCase) {
    Rng rng(2);
    ad::Graph g;
    std::vector<ad::Var> s{g.constant(random_tensor(3, 4, rng)), g.constant(random_tensor(3, 4, rng))};
    const Tensor mean = proto::mean_prototypes(s).value();
    const Tensor uni = proto::prototypes(s, g.constant(Tensor({2, 3}, 1.0 / 3.0))).value();
    EXPECT_EQ(mean, uni);
    std::vector<ad::Var> one{g.constant(Tensor::row({0.3, -2.0}))};
    EXPECT_EQ(proto::mean_prototypes(one).value(), Tensor::row({0.3, -2.0}));
}

TEST(Prototypes, ConvexHullAndShotPermutation) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor sup = random_tensor(4, 3, rng), alpha = random_tensor(1, 4, rng);
        ad::Graph g;
        std::vector<ad::Var> s{g.constant(sup)};
        const Tensor p = proto::prototypes(s, proto::shot_weights(g.constant(alpha))).value();
        for (std::size_t k = 0; k < 3; ++k) {
            double lo = 1e300, hi = -1e300;
            for (std::size_t j = 0; j < 4; ++j) lo = std::min(lo, sup(j, k)), hi = std::max(hi, sup(j, k));
            EXPECT_GE(p(0, k), lo - 1e-12);
            EXPECT_LE(p(0, k), hi + 1e-12);
        }
        std::vector<std::size_t> perm{0, 1, 2, 3};
        rng.shuffle(perm);
        Tensor ps({4, 3}), pa({1, 4});
        for (std::size_t j = 0; j < 4; ++j) {
            pa(0, j) = alpha(0, perm[j]);
            for (std::size_t k = 0; k < 3; ++k) ps(j, k) = sup(perm[j], k);
        }
        std::vector<ad::Var> s2{g.constant(ps)};
        const Tensor p2 = proto::prototypes(s2, proto::shot_weights(g.constant(pa))).value();
        for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(p(0, k), p2(0, k), 1e-12);
    }
}

TEST(Prototypes, ClassifyKnownValues) {
    ad::Graph g;
    const Tensor p = proto::classify(g.constant(Tensor::row({0.25, 0})), g.constant(Tensor::from_rows({{0, 0}, {1, 0}})))
                         .value();
    EXPECT_NEAR(p[0], 0.6225, 1e-4);
    EXPECT_NEAR(p[1], 0.3775, 1e-4);

    const Tensor eq = proto::classify(g.constant(Tensor::row({0, 0})),
                                      g.constant(Tensor::from_rows({{1, 0}, {0, 1}, {-1, 0}, {0, -1}})))
                          .value();
    for (double v : eq.data()) EXPECT_NEAR(v, 0.25, 1e-15);

    // Prototype 1 sits on the query; the others are sqrt(1000) away.
    const double far = std::sqrt(1000.0);
    const Tensor gap = proto::classify(g.constant(Tensor::row({0, 0})),
                                       g.constant(Tensor::from_rows({{far, 0}, {0, 0}, {0, far}})))
                           .value();
    EXPECT_GT(gap[1], 0.999);
}

TEST(Prototypes, ClassifySumsToOneAndIgnoresDistanceOffset) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        ad::Graph g;
        const Tensor q = random_tensor(3, 4, rng), protos = random_tensor(5, 4, rng);
        const Tensor p = proto::classify(g.constant(q), g.constant(protos)).value();
        Tensor logits = proto::class_logits(g.constant(q), g.constant(protos)).value();
        for (double& x : logits.data()) x -= 2.5;
        const Tensor shifted = kernels::softmax(logits, 1);
        for (std::size_t r = 0; r < 3; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 5; ++c) {
                s += p(r, c);
                EXPECT_NEAR(p(r, c), shifted(r, c), 1e-12);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Prototypes, LepnHandCases) {
    const Tensor half = Tensor::row({0.5, 0.5});
    EXPECT_NEAR(proto::loss_lepn(half, Tensor::row({1, 0})), 0.6931, 1e-4);
    EXPECT_NEAR(proto::loss_lepn(half, Tensor::row({1, 1})), 1.3863, 1e-4);
    const Tensor probs = Tensor::from_rows({{0.7, 0.2, 0.1}, {0.1, 0.3, 0.6}});
    const Tensor labels = Tensor::from_rows({{1, 0, 0}, {0, 1, 1}});
    const double expected = (-std::log(0.7) - std::log(0.3) - std::log(0.6)) / 2.0;
    EXPECT_NEAR(proto::loss_lepn(probs, labels), expected, 1e-15);

    // Graph version from logits agrees with the explicit one.
    ad::Graph g;
    FloorEvents floor;
    const Tensor logits = Tensor::from_rows({{0.3, -1.2, 2.0}, {0.0, 0.5, -0.5}});
    const double from_graph = proto::loss_lepn(g.constant(logits), labels, floor).value()[0];
    EXPECT_NEAR(from_graph, proto::loss_lepn(kernels::softmax(logits, 1), labels), 1e-12);
    EXPECT_EQ(floor.count, 0u);
}

TEST(Prototypes, LepnFloorsZeroProbabilities) {
    FloorEvents floor;
    EXPECT_NEAR(proto::loss_lepn(Tensor::row({1.0, 0.0}), Tensor::row({0, 1}), &floor), -std::log(1e-12), 1e-9);
    EXPECT_EQ(floor.count, 1u);
    ad::Graph g;
    FloorEvents graph_floor;
    const double v = proto::loss_lepn(g.constant(Tensor::row({0, -100})), Tensor::row({0, 1}), graph_floor).value()[0];
    EXPECT_NEAR(v, -std::log(1e-12), 1e-9);
    EXPECT_EQ(graph_floor.count, 1u);
}

TEST(Prototypes, SharedSupportsGiveDistinctLabelEnhancedPrototypes) {
    std::size_t distinct = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto sh = generate_shared_support_episode(8, 3, seed);
        ASSERT_EQ(sh.episode.support[0], sh.episode.support[1]);
        distinct += row_distance(lpn_prototypes(sh, seed + 1000), 0, 1) > 1e-12;
    }
    EXPECT_EQ(distinct, 100u);
}

TEST(Prototypes, SharedSupportsCollapseUnderMeanPrototypes) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto sh = generate_shared_support_episode(8, 3, seed);
        Rng rng(seed);
        const auto enc = encoder::EncoderParams::init(8, 4, 2, rng);
        ad::Graph g;
        encoder::EncoderVars vars(g.constant(enc.f1), g.constant(enc.f2), g.constant(enc.f3));
        Stacked st = encode_episode(g, vars, sh.data, sh.episode);
        EXPECT_EQ(row_distance(proto::mean_prototypes(st.supports).value(), 0, 1), 0.0);
    }
}

TEST(Prototypes, LepnGradientsThroughTheWholePath) {
    const auto sh = generate_shared_support_episode(6, 2, 5);
    Rng rng(7);
    const auto enc = encoder::EncoderParams::init(6, 4, 2, rng);
    const auto bil = proto::BilinearParams::init(6, 2, rng);
    ad::ParamMap params{{"f1", enc.f1}, {"f2", enc.f2}, {"f3", enc.f3}, {"u", bil.u}, {"v", bil.v}};
    const Episode& ep = sh.episode;
    auto report = ad::grad_check(
        [&](ad::Graph& g, const ad::BoundParams& b) {
            encoder::EncoderVars vars(b.at("f1"), b.at("f2"), b.at("f3"));
            Stacked st = encode_episode(g, vars, sh.data, ep);
            ad::Var alpha = proto::attention_logits(st.supports, st.labels, b.at("u"), b.at("v"));
            ad::Var protos = proto::prototypes(st.supports, proto::shot_weights(alpha));
            std::vector<ad::Var> q;
            for (auto s : ep.query) q.push_back(encoder::encode(vars, g.constant(sh.data.sentences[s].tokens)).embedding);
            FloorEvents floor;
            return proto::loss_lepn(proto::class_logits(ad::concat(q, 0), protos), episode_label_matrix(ep), floor);
        },
        params, 1e-4);
    EXPECT_TRUE(report.passed()) << report.max_rel_error();
    for (const auto& pc : report.params) EXPECT_TRUE(pc.used) << pc.name;
}

TEST(Prototypes, RankMustBeBelowDimension) {
    Rng rng(1);
    EXPECT_THROW(proto::BilinearParams::init(4, 4, rng), ConfigError);
    EXPECT_THROW(proto::BilinearParams::init(4, 0, rng), ConfigError);
    EXPECT_NO_THROW(proto::BilinearParams::init(4, 3, rng));
}
