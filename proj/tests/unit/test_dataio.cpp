// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "lpn/prototypes.hpp"
#include "lpn/synthetic.hpp"

using namespace lpn;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "lpn_test_dataio";
    fs::create_directories(dir);
    return dir / name;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Independent little-endian writer used as the format oracle.
struct Bytes {
    std::vector<char> b;
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void f32(float f) {
        std::uint32_t v;
        std::memcpy(&v, &f, 4);
        u32(v);
    }
    void str(const std::string& s) { b.insert(b.end(), s.begin(), s.end()); }
};

Dataset tiny() {
    Dataset ds;
    ds.d = 4;
    ds.labels.push_back({7, "food", Tensor({1, 4}, std::vector<double>{0.5, -1.0, 2.0, 0.25})});
    ds.sentences.push_back({3, Tensor({2, 4}, std::vector<double>{1, 2, 3, 4, -1, -2, -3, -4.5}), {7}});
    return ds;
}

Dataset random_dataset(std::size_t sentences, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.d = 6;
    spec.train_classes = 3;
    spec.test_classes = 2;
    spec.sentences_per_class = sentences / 5;
    spec.min_tokens = 1;
    spec.max_tokens = 4;
    spec.aspect_weights = {0.6, 0.4};
    return generate_synthetic(spec, seed);
}

} // namespace

TEST(Lpnd, EncodingMatchesByteLayout) {
    Bytes want;
    want.str("LPND");
    want.u32(1);
    want.u32(4);
    want.u32(1);
    want.u32(1);
    want.u32(7);
    want.u32(4);
    want.str("food");
    want.u32(1);
    for (float f : {0.5f, -1.0f, 2.0f, 0.25f}) want.f32(f);
    want.u32(3);
    want.u32(2);
    for (float f : {1.f, 2.f, 3.f, 4.f, -1.f, -2.f, -3.f, -4.5f}) want.f32(f);
    want.u32(1);
    want.u32(7);
    EXPECT_EQ(lpnd::encode(tiny()), want.b);
}

TEST(Lpnd, MinimalFileRoundTrip) {
    const auto p = temp_path("minimal.lpnd");
    save_dataset(tiny(), p);
    const Dataset back = load_dataset(p);
    EXPECT_EQ(back.labels.size(), 1u);
    EXPECT_EQ(back.sentences.size(), 1u);
    EXPECT_EQ(back.d, 4u);
    EXPECT_EQ(back.sentences[0].length(), 2u);
    EXPECT_EQ(back, tiny());
}

TEST(Lpnd, RoundTripIsExactAtStoragePrecision) {
    const Dataset ds = random_dataset(100, 4);
    const auto p = temp_path("round.lpnd");
    save_dataset(ds, p);
    const Dataset back = load_dataset(p);
    EXPECT_EQ(back, ds);
}

TEST(Lpnd, RepeatedSaveIsByteIdentical) {
    const Dataset ds = random_dataset(50, 9);
    const auto a = temp_path("a.lpnd"), b = temp_path("b.lpnd");
    save_dataset(ds, a);
    save_dataset(ds, b);
    EXPECT_EQ(slurp(a), slurp(b));
    EXPECT_EQ(slurp(fs::path(a.string() + ".splits.json")), slurp(fs::path(b.string() + ".splits.json")));
}

TEST(Lpnd, EmptySentenceListAndLabelsOnly) {
    Dataset ds = tiny();
    ds.sentences.clear();
    const auto p = temp_path("labels_only.lpnd");
    save_dataset(ds, p);
    EXPECT_EQ(load_dataset(p).sentences.size(), 0u);
}

TEST(Lpnd, TruncatedFileIsRejected) {
    const auto bytes = lpnd::encode(tiny());
    for (std::size_t cut : {bytes.size() - 1, bytes.size() - 9, std::size_t{30}}) {
        std::vector<char> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        try {
            lpnd::decode(part);
            FAIL() << "truncation at " << cut << " accepted";
        } catch (const FormatError& e) {
            EXPECT_NE(std::string(e.what()).find("unexpected end of file"), std::string::npos) << e.what();
        }
    }
}

TEST(Lpnd, BadMagicOrVersionIsUnsupported) {
    auto bytes = lpnd::encode(tiny());
    auto bad = bytes;
    bad[0] = 'X';
    try {
        lpnd::decode(bad);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("unsupported format"), std::string::npos);
    }
    bad = bytes;
    bad[4] = 2;
    try {
        lpnd::decode(bad);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("unsupported format"), std::string::npos);
    }
    bytes.push_back(0);
    EXPECT_THROW(lpnd::decode(bytes), FormatError);
}

TEST(Validate, ReportsViolations) {
    auto expect_error = [](const Dataset& ds, const std::string& fragment) {
        try {
            validate(ds);
            FAIL() << "expected: " << fragment;
        } catch (const FormatError& e) {
            EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
        }
    };
    Dataset ds = tiny();
    ds.sentences[0].tokens = Tensor({2, 3});
    expect_error(ds, "inconsistent d");
    ds = tiny();
    ds.sentences[0].labels = {8};
    expect_error(ds, "unknown label");
    ds = tiny();
    ds.sentences[0].labels.clear();
    expect_error(ds, "no labels");
    ds = tiny();
    ds.labels.push_back(ds.labels[0]);
    expect_error(ds, "duplicate label id");
    ds = tiny();
    ds.sentences[0].tokens(0, 0) = std::nan("");
    expect_error(ds, "non-finite");
    ds = tiny();
    ds.split[99] = Split::Test;
    expect_error(ds, "unknown label");
}

TEST(Splits, SidecarRoundTripAndDisjointness) {
    const Dataset ds = random_dataset(50, 2);
    const auto p = temp_path("split.lpnd");
    save_dataset(ds, p);
    const Dataset back = load_dataset(p);
    EXPECT_EQ(back.split, ds.split);
    std::set<std::uint32_t> seen;
    for (Split s : {Split::Train, Split::Validation, Split::Test})
        for (auto id : back.classes_in(s)) EXPECT_TRUE(seen.insert(id).second);

    std::ofstream(temp_path("bad.splits.json")) << R"({"no_such_label": "train"})";
    EXPECT_THROW(load_dataset(p, temp_path("bad.splits.json")), FormatError);
}

TEST(Synthetic, DeterministicForSeed) {
    SyntheticSpec spec;
    spec.aspect_weights = {0.5, 0.3, 0.2};
    EXPECT_EQ(lpnd::encode(generate_synthetic(spec, 17)), lpnd::encode(generate_synthetic(spec, 17)));
    EXPECT_NE(lpnd::encode(generate_synthetic(spec, 17)), lpnd::encode(generate_synthetic(spec, 18)));
}

TEST(Synthetic, SingleClassSingleAspect) {
    SyntheticSpec spec;
    spec.train_classes = 1;
    spec.test_classes = 0;
    spec.sentences_per_class = 12;
    const Dataset ds = generate_synthetic(spec, 1);
    ASSERT_EQ(ds.sentences.size(), 12u);
    for (const auto& s : ds.sentences) EXPECT_EQ(s.labels, std::vector<std::uint32_t>{0});
}

TEST(Synthetic, AspectCountsFollowWeights) {
    SyntheticSpec spec;
    spec.sentences_per_class = 200;
    spec.aspect_weights = {0.5, 0.3, 0.2};
    const Dataset ds = generate_synthetic(spec, 3);
    std::map<std::size_t, double> freq;
    for (const auto& s : ds.sentences) freq[s.labels.size()] += 1.0 / static_cast<double>(ds.sentences.size());
    EXPECT_NEAR(freq[1], 0.5, 0.03);
    EXPECT_NEAR(freq[2], 0.3, 0.03);
    EXPECT_NEAR(freq[3], 0.2, 0.03);
    // Multi-aspect sentences never mix splits.
    for (const auto& s : ds.sentences)
        for (auto l : s.labels) EXPECT_EQ(ds.split.at(l), ds.split.at(s.labels.front()));
}

TEST(Synthetic, RoundRobinTokensAndZeroSeparation) {
    SyntheticSpec spec;
    spec.sigma_within = 0.0;
    spec.aspect_weights = {0.0, 1.0};
    const Dataset ds = generate_synthetic(spec, 5);
    for (const auto& s : ds.sentences) {
        // With no within-class noise, tokens alternate between two class means.
        for (std::size_t r = 2; r < s.length(); ++r) EXPECT_EQ(s.tokens.row_at(r), s.tokens.row_at(r - 2));
        EXPECT_NE(s.tokens.row_at(0), s.tokens.row_at(1));
    }
    spec.sigma_between = 0.0;
    spec.sigma_within = 1.0;
    const Dataset flat = generate_synthetic(spec, 5);
    double mean = 0.0;
    std::size_t n = 0;
    for (const auto& s : flat.sentences)
        for (double x : s.tokens.values()) {
            mean += x;
            ++n;
        }
    EXPECT_NEAR(mean / static_cast<double>(n), 0.0, 0.02);
}

TEST(Synthetic, RandomMixingVariesAspectShares) {
    SyntheticSpec spec;
    spec.sigma_within = 0.0;
    spec.min_tokens = spec.max_tokens = 10;
    spec.aspect_weights = {0.0, 1.0};
    spec.aspect_mixing = AspectMixing::Random;
    const Dataset ds = generate_synthetic(spec, 6);
    std::set<std::size_t> shares;
    for (const auto& s : ds.sentences) {
        // Tokens equal one of two class means; count how many equal the first row.
        std::size_t same = 0;
        for (std::size_t r = 0; r < s.length(); ++r) same += s.tokens.row_at(r) == s.tokens.row_at(0);
        ASSERT_GE(same, 1u);
        ASSERT_LE(same, 9u); // both labels own at least one token
        shares.insert(same);
    }
    EXPECT_GE(shares.size(), 4u);
    spec.aspect_mixing = AspectMixing::RoundRobin;
    for (const auto& s : generate_synthetic(spec, 6).sentences) {
        std::size_t same = 0;
        for (std::size_t r = 0; r < s.length(); ++r) same += s.tokens.row_at(r) == s.tokens.row_at(0);
        EXPECT_EQ(same, 5u);
    }
}

TEST(Synthetic, TooManyAspectsForASplit) {
    SyntheticSpec spec;
    spec.test_classes = 2;
    spec.aspect_weights = {0.4, 0.3, 0.3};
    EXPECT_THROW(generate_synthetic(spec, 1), Error);
}

TEST(Synthetic, SpecJsonRejectsUnknownKeys) {
    const auto spec = synthetic_spec_from_json(nlohmann::json{{"d", 16}, {"aspect_weights", {0.7, 0.3}}});
    EXPECT_EQ(spec.d, 16u);
    EXPECT_EQ(spec.aspect_weights.size(), 2u);
    EXPECT_THROW(synthetic_spec_from_json(nlohmann::json{{"dimension", 16}}), ConfigError);
    nlohmann::json echo = spec;
    EXPECT_EQ(synthetic_spec_from_json(echo).aspect_weights, spec.aspect_weights);
    EXPECT_EQ(synthetic_spec_from_json(nlohmann::json{{"aspect_mixing", "random"}}).aspect_mixing, AspectMixing::Random);
    EXPECT_THROW(synthetic_spec_from_json(nlohmann::json{{"aspect_mixing", "shuffled"}}), ConfigError);
}

TEST(SharedSupport, ThreeWayTwoShotLayout) {
    const auto s = generate_shared_support_episode(8, 2, 1);
    const Episode& ep = s.episode;
    ASSERT_EQ(ep.n_way(), 3u);
    EXPECT_EQ(ep.support[0], ep.support[1]);
    EXPECT_NE(ep.support[0], ep.support[2]);
    EXPECT_EQ(ep.k_shot(), 2u);
    EXPECT_NE(s.data.label(0).tokens, s.data.label(1).tokens);
    for (auto sent : ep.support[0]) {
        EXPECT_TRUE(s.data.sentences[sent].has_label(0));
        EXPECT_TRUE(s.data.sentences[sent].has_label(1));
    }
    EXPECT_NO_THROW(check_episode(s.data, ep));
}

TEST(SharedSupport, MeanPrototypesCoincide) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto s = generate_shared_support_episode(6, 3, seed);
        ad::Graph g;
        std::vector<ad::Var> supports;
        for (const auto& shots : s.episode.support) {
            std::vector<ad::Var> rows;
            for (auto i : shots) rows.push_back(g.constant(s.data.sentences[i].tokens.row_at(0)));
            supports.push_back(ad::concat(rows, 0));
        }
        const Tensor p = proto::mean_prototypes(supports).value();
        EXPECT_EQ(p.row_at(0), p.row_at(1));
    }
}
