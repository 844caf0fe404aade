// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpn/config.hpp"
#include "lpn/dataset.hpp"
#include "lpn/episode.hpp"
#include "lpn/random.hpp"

namespace lpn {

/// Parameters of the Gaussian class-mean token model.
///
/// Each class c gets a mean mu_c = sigma_between * n, n ~ N(0, I). A sentence
/// with labels {c1..cm} has tokens mu_{c(t mod m)} + sigma_within * N(0, I),
/// where c(t) deals tokens over its labels. Label descriptions are drawn
/// around mu_c the same way.
enum class AspectMixing {
    RoundRobin, // c(t) = c_(t mod m): every label gets an equal share
    Random,     // one token per label, the rest owned by uniformly drawn labels
};

inline const char* mixing_name(AspectMixing m) { return m == AspectMixing::Random ? "random" : "round_robin"; }

inline AspectMixing parse_mixing(const std::string& s) {
    if (s == "round_robin") return AspectMixing::RoundRobin;
    if (s == "random") return AspectMixing::Random;
    throw ConfigError("aspect_mixing: expected 'round_robin' or 'random', got '" + s + "'");
}

struct SyntheticSpec {
    std::uint32_t d = 32;
    std::size_t train_classes = 20;
    std::size_t validation_classes = 0;
    std::size_t test_classes = 5;
    /// Sentences generated with each class as their first label.
    std::size_t sentences_per_class = 40;
    std::size_t min_tokens = 6;
    std::size_t max_tokens = 6;
    std::size_t description_tokens = 2;
    double sigma_between = 1.0;
    double sigma_within = 0.25;
    /// Relative frequency of sentences with 1, 2, ... aspects.
    std::vector<double> aspect_weights = {1.0};
    AspectMixing aspect_mixing = AspectMixing::RoundRobin;

    std::size_t max_aspects() const { return aspect_weights.size(); }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"d", s.d},
                       {"train_classes", s.train_classes},
                       {"validation_classes", s.validation_classes},
                       {"test_classes", s.test_classes},
                       {"sentences_per_class", s.sentences_per_class},
                       {"min_tokens", s.min_tokens},
                       {"max_tokens", s.max_tokens},
                       {"description_tokens", s.description_tokens},
                       {"sigma_between", s.sigma_between},
                       {"sigma_within", s.sigma_within},
                       {"aspect_weights", s.aspect_weights},
                       {"aspect_mixing", mixing_name(s.aspect_mixing)}};
}

/// Parses a spec document; missing keys keep defaults, unknown keys are errors.
inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
    SyntheticSpec s;
    std::set<std::string> seen;
    detail::read_key(j, "", "d", s.d, seen);
    detail::read_key(j, "", "train_classes", s.train_classes, seen);
    detail::read_key(j, "", "validation_classes", s.validation_classes, seen);
    detail::read_key(j, "", "test_classes", s.test_classes, seen);
    detail::read_key(j, "", "sentences_per_class", s.sentences_per_class, seen);
    detail::read_key(j, "", "min_tokens", s.min_tokens, seen);
    detail::read_key(j, "", "max_tokens", s.max_tokens, seen);
    detail::read_key(j, "", "description_tokens", s.description_tokens, seen);
    detail::read_key(j, "", "sigma_between", s.sigma_between, seen);
    detail::read_key(j, "", "sigma_within", s.sigma_within, seen);
    seen.insert("aspect_weights");
    if (j.contains("aspect_weights")) {
        const auto& w = j.at("aspect_weights");
        if (!w.is_array()) throw ConfigError("aspect_weights: expected an array of numbers");
        s.aspect_weights.clear();
        for (const auto& x : w) {
            if (!x.is_number()) throw ConfigError("aspect_weights: expected an array of numbers");
            s.aspect_weights.push_back(x.get<double>());
        }
    }
    seen.insert("aspect_mixing");
    if (j.contains("aspect_mixing")) {
        if (!j.at("aspect_mixing").is_string()) throw ConfigError("aspect_mixing: expected a string");
        s.aspect_mixing = parse_mixing(j.at("aspect_mixing").get<std::string>());
    }
    detail::reject_unknown(j, "", seen);
    return s;
}

namespace detail {

inline Tensor class_means(std::size_t classes, std::uint32_t d, double sigma_between, Rng& rng) {
    Tensor mu({classes, d});
    for (double& x : mu.data()) x = sigma_between * rng.normal();
    return mu;
}

/// Tokens dealt round-robin over `owners` (rows of `mu`). With Random
/// mixing, token r < m belongs to owners[r] and later tokens to a uniformly
/// drawn owner, after which positions are shuffled.
inline Tensor draw_tokens(const Tensor& mu, const std::vector<std::size_t>& owners, std::size_t length,
                          double sigma_within, Rng& rng, AspectMixing mixing = AspectMixing::RoundRobin) {
    const std::size_t d = mu.cols();
    std::vector<std::size_t> slot(length);
    for (std::size_t r = 0; r < length; ++r)
        slot[r] = mixing == AspectMixing::Random && r >= owners.size() ? owners[rng.below(owners.size())]
                                                                         : owners[r % owners.size()];
    if (mixing == AspectMixing::Random) rng.shuffle(slot);
    Tensor t({length, d});
    for (std::size_t r = 0; r < length; ++r) {
        const std::size_t owner = slot[r];
        for (std::size_t c = 0; c < d; ++c) t(r, c) = mu(owner, c) + sigma_within * rng.normal();
    }
    round_to_storage(t);
    return t;
}

inline std::string class_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "class_%03zu", i);
    return buf;
}

} // namespace detail

inline Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.d == 0) throw Error("synthetic: d must be positive");
    if (spec.aspect_weights.empty()) throw Error("synthetic: aspect_weights is empty");
    if (spec.min_tokens == 0 || spec.max_tokens < spec.min_tokens) throw Error("synthetic: bad token range");
    if (spec.description_tokens == 0) throw Error("synthetic: description_tokens must be positive");
    if (spec.sigma_between < 0 || spec.sigma_within < 0) throw Error("synthetic: negative sigma");
    for (double w : spec.aspect_weights)
        if (w < 0) throw Error("synthetic: negative aspect weight");
    const std::size_t split_sizes[3] = {spec.train_classes, spec.validation_classes, spec.test_classes};
    for (std::size_t n : split_sizes)
        if (n > 0 && spec.max_aspects() > n)
            throw Error("synthetic: max_aspects " + std::to_string(spec.max_aspects()) + " exceeds the " +
                        std::to_string(n) + " classes of a split");

    Rng rng(mix_seed(seed));
    const std::size_t total = spec.train_classes + spec.validation_classes + spec.test_classes;
    const Tensor mu = detail::class_means(total, spec.d, spec.sigma_between, rng);

    Dataset ds;
    ds.d = spec.d;
    const Split splits[3] = {Split::Train, Split::Validation, Split::Test};
    std::size_t first = 0;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (int s = 0; s < 3; ++s) {
        ranges.emplace_back(first, first + split_sizes[s]);
        for (std::size_t c = first; c < first + split_sizes[s]; ++c) {
            LabelDescription l;
            l.id = static_cast<std::uint32_t>(c);
            l.name = detail::class_name(c);
            l.tokens = detail::draw_tokens(mu, {c}, spec.description_tokens, spec.sigma_within, rng);
            ds.labels.push_back(std::move(l));
            ds.split[static_cast<std::uint32_t>(c)] = splits[s];
        }
        first += split_sizes[s];
    }

    std::uint32_t next_id = 0;
    for (const auto& [lo, hi] : ranges) {
        for (std::size_t c = lo; c < hi; ++c) {
            for (std::size_t k = 0; k < spec.sentences_per_class; ++k) {
                const std::size_t m = rng.categorical(spec.aspect_weights) + 1;
                std::vector<std::size_t> others;
                for (std::size_t o = lo; o < hi; ++o)
                    if (o != c) others.push_back(o);
                rng.shuffle(others);
                std::vector<std::size_t> owners{c};
                owners.insert(owners.end(), others.begin(), others.begin() + static_cast<std::ptrdiff_t>(m - 1));
                rng.shuffle(owners);
                std::size_t length = spec.min_tokens + rng.below(spec.max_tokens - spec.min_tokens + 1);
                length = std::max(length, m);

                Sentence s;
                s.id = next_id++;
                s.tokens = detail::draw_tokens(mu, owners, length, spec.sigma_within, rng, spec.aspect_mixing);
                for (auto o : owners) s.labels.push_back(static_cast<std::uint32_t>(o));
                ds.sentences.push_back(std::move(s));
            }
        }
    }
    validate(ds);
    return ds;
}

/// A self-contained episode together with the sentences it references.
struct SharedSupportEpisode {
    Dataset data;
    Episode episode;
};

/// Builds an N-way K-shot episode in which classes 0 and 1 have element-wise
/// identical support lists: every shared shot mentions both aspects. Label
/// descriptions of the two classes differ. Remaining classes are ordinary.
inline SharedSupportEpisode generate_shared_support_episode(std::uint32_t d, std::size_t k_shot, std::uint64_t seed,
                                                            std::size_t n_way = 3, std::size_t tokens = 5) {
    if (k_shot == 0 || d < 2 || n_way < 2) throw Error("shared-support episode needs K >= 1, d >= 2, N >= 2");
    Rng rng(mix_seed(seed ^ 0xF16u));
    const Tensor mu = detail::class_means(n_way, d, 1.0, rng);
    const double noise = 0.25;

    SharedSupportEpisode out;
    Dataset& ds = out.data;
    ds.d = d;
    for (std::size_t c = 0; c < n_way; ++c) {
        LabelDescription l;
        l.id = static_cast<std::uint32_t>(c);
        l.name = detail::class_name(c);
        l.tokens = detail::draw_tokens(mu, {c}, 2, noise, rng);
        ds.split[l.id] = Split::Test;
        ds.labels.push_back(std::move(l));
    }

    auto add_sentence = [&](std::vector<std::size_t> owners) {
        Sentence s;
        s.id = static_cast<std::uint32_t>(ds.sentences.size());
        s.tokens = detail::draw_tokens(mu, owners, std::max(tokens, owners.size()), noise, rng);
        for (auto o : owners) s.labels.push_back(static_cast<std::uint32_t>(o));
        ds.sentences.push_back(std::move(s));
        return ds.sentences.size() - 1;
    };

    Episode& ep = out.episode;
    for (std::size_t c = 0; c < n_way; ++c) ep.class_ids.push_back(static_cast<std::uint32_t>(c));
    std::vector<std::size_t> shared;
    for (std::size_t j = 0; j < k_shot; ++j) shared.push_back(add_sentence(j % 2 ? std::vector<std::size_t>{1, 0}
                                                                                : std::vector<std::size_t>{0, 1}));
    ep.support.push_back(shared);
    ep.support.push_back(shared);
    for (std::size_t c = 2; c < n_way; ++c) {
        std::vector<std::size_t> shots;
        for (std::size_t j = 0; j < k_shot; ++j) shots.push_back(add_sentence({c}));
        ep.support.push_back(shots);
    }
    // One single-aspect query per class plus one query mentioning classes 0 and 1.
    for (std::size_t c = 0; c < n_way; ++c) ep.query.push_back(add_sentence({c}));
    ep.query.push_back(add_sentence({0, 1}));
    for (auto q : ep.query) {
        auto y = episode_labels(ds.sentences[q], ep.class_ids);
        std::size_t count = 0;
        for (auto v : y) count += v;
        ep.query_labels.push_back(std::move(y));
        ep.query_counts.push_back(count);
    }
    validate(ds);
    return out;
}

} // namespace lpn
