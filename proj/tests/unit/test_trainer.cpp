// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "lpn/synthetic.hpp"
#include "lpn/trainer.hpp"

using namespace lpn;

namespace {

RunConfig small_config(Variant variant = Variant::WW) {
    RunConfig c;
    c.n_way = 3;
    c.k_shot = 2;
    c.q_per_class = 2;
    c.d = 8;
    c.d_hidden = 6;
    c.r_heads = 2;
    c.k_rank = 3;
    c.variant = variant;
    c.lr = 1e-3;
    c.episodes_train = 20;
    c.episodes_val = 5;
    c.validate_every = 10;
    c.seed = 17;
    return c;
}

const Dataset& small_data() {
    static const Dataset ds = [] {
        SyntheticSpec spec;
        spec.d = 8;
        spec.train_classes = 6;
        spec.validation_classes = 3;
        spec.test_classes = 3;
        spec.sentences_per_class = 10;
        spec.min_tokens = 3;
        spec.max_tokens = 5;
        spec.aspect_weights = {0.6, 0.4};
        return generate_synthetic(spec, 5);
    }();
    return ds;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("lpn_trainer_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace

TEST(Trainer, InitIsDeterministic) {
    const RunConfig c = small_config();
    EXPECT_EQ(init_params(c, 3), init_params(c, 3));
    EXPECT_FALSE(init_params(c, 3) == init_params(c, 4));
}

TEST(Trainer, DefaultModelShapes) {
    RunConfig c;
    const ModelParams p = init_params(c, 1);
    EXPECT_EQ(p.encoder.f1.shape(), (Shape{256, 768}));
    EXPECT_EQ(p.encoder.f2.shape(), (Shape{4, 256}));
    EXPECT_EQ(p.encoder.f3.shape(), (Shape{768, 3072}));
    EXPECT_EQ(p.bilinear.u.shape(), (Shape{768, 100}));
    EXPECT_EQ(p.bilinear.v.shape(), (Shape{768, 100}));
    EXPECT_EQ(p.contrastive.w_a.shape(), (Shape{768, 1536}));
    EXPECT_EQ(p.count.w_l.shape(), (Shape{5, 768}));
}

TEST(Trainer, RankEqualToDimensionIsRejected) {
    RunConfig c = small_config();
    c.k_rank = c.d;
    EXPECT_THROW(init_params(c, 1), ConfigError);
}

TEST(Trainer, ZeroLearningRateLeavesParametersUntouched) {
    for (double wd : {0.0, 0.01}) {
        RunConfig c = small_config();
        c.lr = 0.0;
        c.weight_decay = wd;
        TrainState s = init_state(c);
        const ModelParams before = s.params;
        train_step(s, small_data(), sample_episode(small_data(), Split::Train, 3, 2, 2, 1), c);
        EXPECT_EQ(s.params, before);
        EXPECT_EQ(s.step(), 1u);
    }
}

TEST(Trainer, ZeroGradientZeroDecayIsIdentity) {
    Rng rng(1);
    ad::ParamMap params{{"a", Tensor({2, 3})}, {"b", Tensor({1, 4})}};
    for (auto& [_, t] : params)
        for (double& x : t.data()) x = rng.normal();
    const ad::ParamMap before = params;
    ad::Gradients zero{{"a", Tensor({2, 3})}, {"b", Tensor({1, 4})}};
    AdamWState st;
    for (int i = 0; i < 5; ++i) adamw_step(params, zero, st, {1e-2, 0.9, 0.999, 1e-8, 0.0});
    EXPECT_EQ(params, before);
}

TEST(Trainer, AdamWMatchesHandComputedSteps) {
    ad::ParamMap p{{"x", Tensor::row({1.0})}};
    AdamWState st;
    const AdamWConfig cfg{0.1, 0.9, 0.999, 1e-8, 0.01};
    double theta = 1.0, m = 0, v = 0;
    for (int t = 1; t <= 3; ++t) {
        const double g = 2.0 * theta;
        adamw_step(p, ad::Gradients{{"x", Tensor::row({g})}}, st, cfg);
        theta -= 0.1 * 0.01 * theta;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        theta -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        EXPECT_NEAR(p.at("x")[0], theta, 1e-15);
    }
}

TEST(Trainer, UpdateFollowsTheNumericalGradient) {
    const RunConfig c = small_config();
    TrainState s = init_state(c);
    const Episode ep = sample_episode(small_data(), Split::Train, 3, 2, 2, 9);
    const ad::ParamMap base = s.params.to_map();
    const auto loss_at = [&](const ad::ParamMap& m) {
        ad::Graph g;
        const ModelVars vars(ad::bind_parameters(g, m));
        return forward_episode(g, vars, small_data(), ep, LossSettings::from(c)).total->value().item();
    };
    // First AdamW step moves every entry by about lr against the gradient sign.
    train_step(s, small_data(), ep, c);
    const ad::ParamMap after = s.params.to_map();
    std::size_t checked = 0;
    for (const char* name : {"encoder.F1", "bilinear.U", "contrastive.W_a", "count.W_l"}) {
        for (std::size_t i : {0u, 3u}) {
            ad::ParamMap plus = base, minus = base;
            plus.at(name)[i] += 1e-5;
            minus.at(name)[i] -= 1e-5;
            const double numeric = (loss_at(plus) - loss_at(minus)) / 2e-5;
            if (std::abs(numeric) < 1e-6) continue;
            const double moved = after.at(name)[i] - base.at(name)[i] * (1 - c.lr * c.weight_decay);
            EXPECT_LT(moved * numeric, 0.0) << name << '[' << i << ']';
            EXPECT_NEAR(std::abs(moved), c.lr, 1e-3 * c.lr + 1e-9);
            ++checked;
        }
    }
    EXPECT_GE(checked, 4u);
}

TEST(Trainer, TwoStepsOnOneEpisodeRarelyIncreaseTheLoss) {
    const RunConfig c = small_config();
    std::size_t ok = 0;
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        RunConfig t = c;
        t.seed = 1000 + trial;
        TrainState s = init_state(t);
        const Episode ep = sample_episode(small_data(), Split::Train, 3, 2, 2, trial);
        const double first = train_step(s, small_data(), ep, t).loss.total;
        const double second = train_step(s, small_data(), ep, t).loss.total;
        ok += second <= first;
    }
    EXPECT_GE(ok, 95u);
}

TEST(Trainer, MeanVariantMatchesPlainPrototypicalPath) {
    const RunConfig c = small_config(Variant::OO);
    const ModelParams params = init_params(c, 2);
    const Episode ep = sample_episode(small_data(), Split::Train, 3, 2, 2, 4);
    ad::Graph g;
    const LossSettings s = LossSettings::from(c);
    const auto f = forward_episode(g, ModelVars(ad::bind_parameters(g, params.to_map())), small_data(), ep, s);
    EXPECT_FALSE(f.shot_weights.has_value());
    const Tensor& protos = f.prototypes.value();
    for (std::size_t i = 0; i < 3; ++i) {
        std::vector<double> mean(c.d);
        for (auto sidx : ep.support[i]) {
            const Tensor o = encoder::encode(params.encoder, small_data().sentences[sidx].tokens);
            for (std::size_t k = 0; k < c.d; ++k) mean[k] += o[k] / 2.0;
        }
        for (std::size_t k = 0; k < c.d; ++k) EXPECT_NEAR(protos(i, k), mean[k], 1e-12);
    }
    const auto b = breakdown(f, s);
    EXPECT_NEAR(b.total, b.lepn + c.lambda * b.count, 1e-12);
    EXPECT_EQ(b.scl, 0.0);
}

TEST(Trainer, ZeroEpisodesReturnsTheInitialState) {
    RunConfig c = small_config();
    c.episodes_train = 0;
    const TrainResult r = train_loop(c, small_data());
    EXPECT_EQ(r.final_state, init_state(c));
    EXPECT_EQ(r.best_state, r.final_state);
    EXPECT_TRUE(r.validations.empty());
}

TEST(Trainer, LossTraceIsDeterministic) {
    const RunConfig c = small_config();
    const TrainResult a = train_loop(c, small_data());
    const TrainResult b = train_loop(c, small_data());
    ASSERT_EQ(a.final_state.history.size(), 20u);
    EXPECT_EQ(a.final_state, b.final_state);
    EXPECT_EQ(a.best_state, b.best_state);
    ASSERT_EQ(a.validations.size(), 2u);
    EXPECT_EQ(a.validations[1].auc, b.validations[1].auc);
    EXPECT_EQ(a.validations[0].step, 10u);
}

TEST(Trainer, BestStateTracksValidationAuc) {
    const RunConfig c = small_config();
    const TrainResult r = train_loop(c, small_data());
    ASSERT_TRUE(r.best_auc.has_value());
    double best = 0;
    std::uint64_t best_step = 0;
    for (const auto& v : r.validations)
        if (v.auc > best) best = v.auc, best_step = v.step;
    EXPECT_EQ(*r.best_auc, best);
    EXPECT_EQ(r.best_state.step(), best_step);
}

TEST(Trainer, NonFiniteLossNamesTheStep) {
    RunConfig c = small_config();
    TrainState s = init_state(c);
    for (double& x : s.params.encoder.f3.data()) x = 1e200;
    try {
        train_step(s, small_data(), sample_episode(small_data(), Split::Train, 3, 2, 2, 1), c);
        FAIL();
    } catch (const NonFiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("training step 0"), std::string::npos) << e.what();
    }
}

TEST(Trainer, CheckpointRoundTripIsByteIdentical) {
    const RunConfig c = small_config();
    const TrainResult r = train_loop(c, small_data());
    const auto dir = temp_dir("roundtrip");
    save_checkpoint(r.final_state, config_to_json(c), dir / "a.ckpt");
    const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
    EXPECT_EQ(loaded.state, r.final_state);
    EXPECT_EQ(config_from_json(loaded.config), c);
    for (std::size_t i = 0; i < loaded.state.history.size(); ++i)
        EXPECT_EQ(loaded.state.history[i].loss.gamma, c.gamma);
    save_checkpoint(loaded.state, loaded.config, dir / "b.ckpt");
    EXPECT_EQ(read_bytes(dir / "a.ckpt"), read_bytes(dir / "b.ckpt"));
}

TEST(Trainer, CorruptCheckpointsAreRejected) {
    const RunConfig c = small_config();
    const auto bytes = encode_checkpoint(init_state(c), config_to_json(c));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    EXPECT_THROW(decode_checkpoint(bad_version), FormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(decode_checkpoint(trailing), FormatError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    EXPECT_THROW(decode_checkpoint(truncated), FormatError);
}

TEST(Trainer, IncompatibleConfigurationIsRejected) {
    const RunConfig c = small_config();
    const TrainState s = init_state(c);
    RunConfig other = c;
    other.n_way = 4;
    EXPECT_THROW(check_compatible(s, other), ConfigError);
    other = c;
    other.variant = Variant::WO;
    EXPECT_THROW(check_compatible(s, other), ConfigError);
    EXPECT_NO_THROW(check_compatible(s, c));
    other = c;
    other.n_way = 4;
    EXPECT_THROW(train_loop(other, small_data(), s), ConfigError);
}

TEST(Trainer, ResumeReproducesTheUnbrokenRun) {
    RunConfig c = small_config();
    c.episodes_train = 20;
    const TrainResult unbroken = train_loop(c, small_data());

    RunConfig half = c;
    half.episodes_train = 10;
    const TrainResult first = train_loop(half, small_data());
    const auto dir = temp_dir("resume");
    save_checkpoint(first.final_state, config_to_json(half), dir / "half.ckpt");
    const Checkpoint ck = load_checkpoint(dir / "half.ckpt");
    const TrainResult resumed = train_loop(c, small_data(), ck.state);

    ASSERT_EQ(resumed.final_state.history.size(), 20u);
    for (std::size_t i = 10; i < 20; ++i) EXPECT_EQ(resumed.final_state.history[i], unbroken.final_state.history[i]);
    EXPECT_EQ(resumed.final_state.params, unbroken.final_state.params);
}
