// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "lpn/dataset.hpp"
#include "lpn/random.hpp"

namespace lpn {

/// One N-way K-shot task. Sentences are referenced by index into the
/// dataset the episode was sampled from.
struct Episode {
    std::vector<std::uint32_t> class_ids;
    /// support[i][j]: j-th shot of class i. A sentence may serve several classes.
    std::vector<std::vector<std::size_t>> support;
    std::vector<std::size_t> query;
    /// query_labels[q][i] == 1 iff query q carries class_ids[i].
    std::vector<std::vector<std::uint8_t>> query_labels;
    std::vector<std::size_t> query_counts;

    std::size_t n_way() const { return class_ids.size(); }
    std::size_t k_shot() const { return support.empty() ? 0 : support.front().size(); }

    friend bool operator==(const Episode&, const Episode&) = default;
};

/// Multi-hot vector of a sentence restricted to the episode's classes.
inline std::vector<std::uint8_t> episode_labels(const Sentence& s, const std::vector<std::uint32_t>& class_ids) {
    std::vector<std::uint8_t> y(class_ids.size(), 0);
    for (std::size_t i = 0; i < class_ids.size(); ++i) y[i] = s.has_label(class_ids[i]) ? 1 : 0;
    return y;
}

/// |Q| x N matrix of {0,1} query labels.
inline Tensor episode_label_matrix(const Episode& ep) {
    Tensor y({ep.query.size(), ep.n_way()});
    for (std::size_t q = 0; q < ep.query.size(); ++q)
        for (std::size_t i = 0; i < ep.n_way(); ++i) y(q, i) = ep.query_labels[q][i];
    return y;
}

/// Distinct sentences of the episode: supports first (class order, shot
/// order, first occurrence wins), then queries.
inline std::vector<std::size_t> episode_sentences(const Episode& ep) {
    std::vector<std::size_t> out;
    std::set<std::size_t> seen;
    for (const auto& shots : ep.support)
        for (auto s : shots)
            if (seen.insert(s).second) out.push_back(s);
    for (auto s : ep.query)
        if (seen.insert(s).second) out.push_back(s);
    return out;
}

/// Throws Error if any episode invariant is violated.
inline void check_episode(const Dataset& ds, const Episode& ep) {
    const std::size_t n = ep.n_way();
    if (n == 0 || ep.support.size() != n) throw Error("episode: support does not have one list per class");
    std::set<std::size_t> support_set;
    for (std::size_t i = 0; i < n; ++i) {
        if (ep.support[i].size() != ep.k_shot()) throw Error("episode: ragged support lists");
        for (auto s : ep.support[i]) {
            if (!ds.sentences.at(s).has_label(ep.class_ids[i]))
                throw Error("episode: support sentence lacks its class label");
            support_set.insert(s);
        }
    }
    if (ep.query_labels.size() != ep.query.size() || ep.query_counts.size() != ep.query.size())
        throw Error("episode: query bookkeeping sizes disagree");
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
        if (support_set.count(ep.query[q])) throw Error("episode: sentence in both support and query");
        std::size_t ones = 0;
        for (auto v : ep.query_labels[q]) ones += v;
        if (ones == 0) throw Error("episode: query without an in-episode label");
        if (ep.query_counts[q] != ones) throw Error("episode: query count disagrees with its label vector");
    }
}

namespace detail {

inline std::vector<std::size_t> sentences_with(const Dataset& ds, std::uint32_t label) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds.sentences.size(); ++i)
        if (ds.sentences[i].has_label(label)) out.push_back(i);
    return out;
}

inline std::string class_desc(const Dataset& ds, std::uint32_t id) {
    return "class " + std::to_string(id) + " ('" + ds.label(id).name + "')";
}

/// Draws queries per class from each class's shuffled pool, skipping support
/// sentences and sentences already drawn.
inline void fill_queries(const Dataset& ds, Episode& ep, const std::vector<std::vector<std::size_t>>& pools,
                         std::size_t q_per_class) {
    std::set<std::size_t> taken;
    for (const auto& shots : ep.support) taken.insert(shots.begin(), shots.end());
    for (std::size_t i = 0; i < ep.n_way(); ++i) {
        std::size_t drawn = 0;
        for (auto s : pools[i]) {
            if (drawn == q_per_class) break;
            if (!taken.insert(s).second) continue;
            ep.query.push_back(s);
            ++drawn;
        }
    }
    for (auto s : ep.query) {
        auto y = episode_labels(ds.sentences[s], ep.class_ids);
        std::size_t count = 0;
        for (auto v : y) count += v;
        ep.query_labels.push_back(std::move(y));
        ep.query_counts.push_back(count);
    }
}

inline std::vector<std::uint32_t> split_classes(const Dataset& ds, Split split, std::size_t n_way) {
    auto classes = ds.classes_in(split);
    if (classes.size() < n_way)
        throw Error(std::string("split '") + split_name(split) + "' has " + std::to_string(classes.size()) +
                    " classes, need " + std::to_string(n_way));
    return classes;
}

} // namespace detail

/// Samples an N-way K-shot episode from one split.
///
/// Classes are drawn uniformly without replacement. Each class draws its K
/// shots independently, so one sentence may appear in several support lists.
/// Queries come from the remaining sentences of the episode's classes, are
/// deduplicated, and carry only in-episode labels.
inline Episode sample_episode(const Dataset& ds, Split split, std::size_t n_way, std::size_t k_shot,
                              std::size_t q_per_class, std::uint64_t seed) {
    if (n_way == 0 || k_shot == 0) throw Error("episode: n_way and k_shot must be positive");
    Rng rng(mix_seed(seed));
    auto classes = detail::split_classes(ds, split, n_way);
    rng.shuffle(classes);
    classes.resize(n_way);

    Episode ep;
    ep.class_ids = classes;
    std::vector<std::vector<std::size_t>> pools;
    for (auto c : classes) {
        auto pool = detail::sentences_with(ds, c);
        if (pool.size() < k_shot + q_per_class)
            throw Error("episode: " + detail::class_desc(ds, c) + " has " + std::to_string(pool.size()) +
                        " sentences, need " + std::to_string(k_shot + q_per_class));
        rng.shuffle(pool);
        ep.support.emplace_back(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k_shot));
        pools.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(k_shot), pool.end());
    }
    detail::fill_queries(ds, ep, pools, q_per_class);
    return ep;
}

/// Like sample_episode, but two of the N classes are forced to share the
/// exact same K support sentences (each carrying both labels). Fails if no
/// class pair of the split co-occurs in at least K sentences.
inline Episode sample_shared_pair_episode(const Dataset& ds, Split split, std::size_t n_way, std::size_t k_shot,
                                          std::size_t q_per_class, std::uint64_t seed) {
    if (n_way < 2 || k_shot == 0) throw Error("shared-pair episode needs n_way >= 2 and k_shot >= 1");
    Rng rng(mix_seed(seed ^ 0x5EA4EDULL));
    const auto classes = detail::split_classes(ds, split, n_way);

    std::vector<std::pair<std::uint32_t, std::uint32_t>> eligible;
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::size_t>> shared;
    for (std::size_t a = 0; a < classes.size(); ++a)
        for (std::size_t b = a + 1; b < classes.size(); ++b) {
            std::vector<std::size_t> both;
            for (std::size_t s = 0; s < ds.sentences.size(); ++s)
                if (ds.sentences[s].has_label(classes[a]) && ds.sentences[s].has_label(classes[b])) both.push_back(s);
            if (both.size() >= k_shot) {
                eligible.emplace_back(classes[a], classes[b]);
                shared.emplace(eligible.back(), std::move(both));
            }
        }
    if (eligible.empty())
        throw Error("shared-pair episode: no class pair co-occurs in " + std::to_string(k_shot) + " sentences");
    const auto pair = eligible[rng.below(eligible.size())];

    std::vector<std::uint32_t> rest;
    for (auto c : classes)
        if (c != pair.first && c != pair.second) rest.push_back(c);
    rng.shuffle(rest);
    rest.resize(n_way - 2);

    Episode ep;
    ep.class_ids = {pair.first, pair.second};
    ep.class_ids.insert(ep.class_ids.end(), rest.begin(), rest.end());
    // Shuffle class order so the shared pair is not always first.
    rng.shuffle(ep.class_ids);

    auto both = shared.at(pair);
    rng.shuffle(both);
    const std::vector<std::size_t> shared_shots(both.begin(), both.begin() + static_cast<std::ptrdiff_t>(k_shot));

    std::vector<std::vector<std::size_t>> pools;
    for (auto c : ep.class_ids) {
        auto pool = detail::sentences_with(ds, c);
        if (pool.size() < k_shot + q_per_class)
            throw Error("episode: " + detail::class_desc(ds, c) + " has " + std::to_string(pool.size()) +
                        " sentences, need " + std::to_string(k_shot + q_per_class));
        rng.shuffle(pool);
        if (c == pair.first || c == pair.second) {
            ep.support.push_back(shared_shots);
            pools.push_back(pool);
        } else {
            ep.support.emplace_back(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k_shot));
            pools.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(k_shot), pool.end());
        }
    }
    detail::fill_queries(ds, ep, pools, q_per_class);
    return ep;
}

/// Draws a shared-pair episode with probability `shared_fraction`, an
/// ordinary one otherwise. The coin flip is part of the seed stream.
inline Episode sample_mixed_episode(const Dataset& ds, Split split, std::size_t n_way, std::size_t k_shot,
                                    std::size_t q_per_class, double shared_fraction, std::uint64_t seed) {
    if (shared_fraction > 0.0) {
        Rng coin(derive_seed(seed, 0x5A1CE));
        if (coin.uniform() < shared_fraction)
            return sample_shared_pair_episode(ds, split, n_way, k_shot, q_per_class, seed);
    }
    return sample_episode(ds, split, n_way, k_shot, q_per_class, seed);
}

} // namespace lpn
