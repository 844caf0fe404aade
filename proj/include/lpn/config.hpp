// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "lpn/error.hpp"

namespace lpn {

/// Model variants: prototypes (o = mean / w = label-enhanced) and
/// contrastive learning (o = off / w = on).
enum class Variant { OO, WO, WW };

inline const char* variant_name(Variant v) {
    switch (v) {
    case Variant::OO: return "oo";
    case Variant::WO: return "wo";
    case Variant::WW: return "ww";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "oo") return Variant::OO;
    if (s == "wo") return Variant::WO;
    if (s == "ww") return Variant::WW;
    throw ConfigError("model.variant: expected one of oo, wo, ww, got '" + s + "'");
}

inline const char* variant_description(Variant v) {
    switch (v) {
    case Variant::OO: return "mean-prototype ablation (no label enhancement, no contrastive loss)";
    case Variant::WO: return "label-enhanced prototypes, no contrastive loss";
    case Variant::WW: return "label-enhanced prototypes with contrastive loss";
    }
    return "?";
}

/// Every knob of a run. Defaults reproduce the published hyperparameters
/// (d=768, d'=256, R=4, k=100, lambda=0.1, gamma=0.01, tau=0.1, AdamW lr 1e-5)
/// and the 5 runs x 600 test episodes protocol.
struct RunConfig {
    // episode
    std::size_t n_way = 5;
    std::size_t k_shot = 5;
    std::size_t q_per_class = 5;
    /// Fraction of sampled episodes that force a shared-support class pair.
    double shared_pair_fraction = 0.0;
    // model
    std::size_t d = 768;
    std::size_t d_hidden = 256;
    std::size_t r_heads = 4;
    std::size_t k_rank = 100;
    Variant variant = Variant::WW;
    bool normalize_contrastive = false;
    // loss
    double tau = 0.1;
    double gamma = 0.01;
    double lambda = 0.1;
    // optimizer
    double lr = 1e-5;
    double weight_decay = 0.01;
    // schedule
    std::size_t episodes_train = 1000;
    std::size_t episodes_eval = 600;
    std::size_t episodes_val = 100;
    std::size_t validate_every = 200;
    std::size_t runs = 5;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    // paths
    std::string dataset;
    std::string splits;
    std::string checkpoint = "lpn.ckpt";
    std::string report = "report.jsonl";
    std::string train_log = "train_log.jsonl";

    void validate() const {
        if (n_way == 0) throw ConfigError("episode.n_way must be positive");
        if (k_shot == 0) throw ConfigError("episode.k_shot must be positive");
        if (shared_pair_fraction < 0.0 || shared_pair_fraction > 1.0)
            throw ConfigError("episode.shared_pair_fraction must lie in [0, 1]");
        if (d == 0 || d_hidden == 0 || r_heads == 0) throw ConfigError("model dimensions must be positive");
        if (k_rank == 0 || k_rank >= d) throw ConfigError("model.k_rank must satisfy 1 <= k_rank < d");
        if (!(tau > 0.0)) throw ConfigError("loss.tau must be positive");
        if (gamma < 0.0) throw ConfigError("loss.gamma must be nonnegative");
        if (lambda < 0.0) throw ConfigError("loss.lambda must be nonnegative");
        if (lr < 0.0) throw ConfigError("optim.lr must be nonnegative");
        if (weight_decay < 0.0) throw ConfigError("optim.weight_decay must be nonnegative");
        if (validate_every == 0) throw ConfigError("schedule.validate_every must be positive");
        if (runs == 0) throw ConfigError("schedule.runs must be positive");
        if (workers == 0) throw ConfigError("workers must be positive");
    }

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline nlohmann::json config_to_json(const RunConfig& c) {
    using nlohmann::json;
    return json{
        {"episode",
         {{"n_way", c.n_way}, {"k_shot", c.k_shot}, {"q_per_class", c.q_per_class},
          {"shared_pair_fraction", c.shared_pair_fraction}}},
        {"model",
         {{"d", c.d}, {"d_hidden", c.d_hidden}, {"r_heads", c.r_heads}, {"k_rank", c.k_rank},
          {"variant", variant_name(c.variant)}, {"normalize_contrastive", c.normalize_contrastive}}},
        {"loss", {{"tau", c.tau}, {"gamma", c.gamma}, {"lambda", c.lambda}}},
        {"optim", {{"lr", c.lr}, {"weight_decay", c.weight_decay}}},
        {"schedule",
         {{"episodes_train", c.episodes_train}, {"episodes_eval", c.episodes_eval}, {"episodes_val", c.episodes_val},
          {"validate_every", c.validate_every}, {"runs", c.runs}}},
        {"seed", c.seed},
        {"workers", c.workers},
        {"paths",
         {{"dataset", c.dataset}, {"splits", c.splits}, {"checkpoint", c.checkpoint}, {"report", c.report},
          {"train_log", c.train_log}}},
    };
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& obj, const std::string& section, const char* key, T& out,
              std::set<std::string>& seen) {
    seen.insert(key);
    if (!obj.contains(key)) return;
    const std::string where = section.empty() ? std::string(key) : section + "." + key;
    const auto& v = obj.at(key);
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(where + ": expected boolean");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0))
                throw ConfigError(where + ": expected nonnegative integer");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(where + ": expected number");
        } else {
            if (!v.is_string()) throw ConfigError(where + ": expected string");
        }
        out = v.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

inline void reject_unknown(const nlohmann::json& obj, const std::string& section, const std::set<std::string>& known) {
    for (const auto& [key, _] : obj.items())
        if (!known.count(key))
            throw ConfigError("unknown configuration key '" + (section.empty() ? key : section + "." + key) + "'");
}

inline const nlohmann::json& section(const nlohmann::json& root, const char* name, const nlohmann::json& empty) {
    if (!root.contains(name)) return empty;
    const auto& s = root.at(name);
    if (!s.is_object()) throw ConfigError(std::string(name) + ": expected an object");
    return s;
}

} // namespace detail

/// Parses a configuration document. Missing keys keep their defaults;
/// unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& root) {
    if (!root.is_object()) throw ConfigError("configuration must be a JSON object");
    RunConfig c;
    const nlohmann::json empty = nlohmann::json::object();
    std::set<std::string> top{"episode", "model", "loss", "optim", "schedule", "paths"};

    {
        std::set<std::string> seen;
        const auto& s = detail::section(root, "episode", empty);
        detail::read_key(s, "episode", "n_way", c.n_way, seen);
        detail::read_key(s, "episode", "k_shot", c.k_shot, seen);
        detail::read_key(s, "episode", "q_per_class", c.q_per_class, seen);
        detail::read_key(s, "episode", "shared_pair_fraction", c.shared_pair_fraction, seen);
        detail::reject_unknown(s, "episode", seen);
    }
    {
        std::set<std::string> seen;
        const auto& s = detail::section(root, "model", empty);
        std::string variant = variant_name(c.variant);
        detail::read_key(s, "model", "d", c.d, seen);
        detail::read_key(s, "model", "d_hidden", c.d_hidden, seen);
        detail::read_key(s, "model", "r_heads", c.r_heads, seen);
        detail::read_key(s, "model", "k_rank", c.k_rank, seen);
        detail::read_key(s, "model", "variant", variant, seen);
        detail::read_key(s, "model", "normalize_contrastive", c.normalize_contrastive, seen);
        detail::reject_unknown(s, "model", seen);
        c.variant = parse_variant(variant);
    }
    {
        std::set<std::string> seen;
        const auto& s = detail::section(root, "loss", empty);
        detail::read_key(s, "loss", "tau", c.tau, seen);
        detail::read_key(s, "loss", "gamma", c.gamma, seen);
        detail::read_key(s, "loss", "lambda", c.lambda, seen);
        detail::reject_unknown(s, "loss", seen);
    }
    {
        std::set<std::string> seen;
        const auto& s = detail::section(root, "optim", empty);
        detail::read_key(s, "optim", "lr", c.lr, seen);
        detail::read_key(s, "optim", "weight_decay", c.weight_decay, seen);
        detail::reject_unknown(s, "optim", seen);
    }
    {
        std::set<std::string> seen;
        const auto& s = detail::section(root, "schedule", empty);
        detail::read_key(s, "schedule", "episodes_train", c.episodes_train, seen);
        detail::read_key(s, "schedule", "episodes_eval", c.episodes_eval, seen);
        detail::read_key(s, "schedule", "episodes_val", c.episodes_val, seen);
        detail::read_key(s, "schedule", "validate_every", c.validate_every, seen);
        detail::read_key(s, "schedule", "runs", c.runs, seen);
        detail::reject_unknown(s, "schedule", seen);
    }
    {
        std::set<std::string> seen;
        const auto& s = detail::section(root, "paths", empty);
        detail::read_key(s, "paths", "dataset", c.dataset, seen);
        detail::read_key(s, "paths", "splits", c.splits, seen);
        detail::read_key(s, "paths", "checkpoint", c.checkpoint, seen);
        detail::read_key(s, "paths", "report", c.report, seen);
        detail::read_key(s, "paths", "train_log", c.train_log, seen);
        detail::reject_unknown(s, "paths", seen);
    }
    detail::read_key(root, "", "seed", c.seed, top);
    detail::read_key(root, "", "workers", c.workers, top);
    detail::reject_unknown(root, "", top);
    c.validate();
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

} // namespace lpn
