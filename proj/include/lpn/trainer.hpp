// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpn/metrics.hpp"
#include "lpn/optimizer.hpp"

namespace lpn {

/// Per-episode training record.
struct StepRecord {
    inference::LossBreakdown loss;
    std::size_t floor_events = 0;
    bool contrastive_signal = false;

    friend bool operator==(const StepRecord& a, const StepRecord& b) {
        return a.loss.lepn == b.loss.lepn && a.loss.scl == b.loss.scl && a.loss.count == b.loss.count &&
               a.loss.total == b.loss.total && a.floor_events == b.floor_events &&
               a.contrastive_signal == b.contrastive_signal;
    }
};

struct TrainState {
    ModelParams params;
    AdamWState optim; ///< optim.step doubles as the episode counter
    std::uint64_t seed = 1;
    std::vector<StepRecord> history;

    std::uint64_t step() const { return optim.step; }

    friend bool operator==(const TrainState&, const TrainState&) = default;
};

inline TrainState init_state(const RunConfig& config) {
    config.validate();
    return {init_params(config, config.seed), {}, config.seed, {}};
}

inline AdamWConfig adamw_config(const RunConfig& c) { return {c.lr, 0.9, 0.999, 1e-8, c.weight_decay}; }

/// Seed of the training episode drawn at step `step` (0-based).
inline std::uint64_t train_episode_seed(std::uint64_t seed, std::uint64_t step) {
    return derive_seed(derive_seed(seed, 0x7EA1ULL), step);
}

/// One forward pass, backward pass and AdamW update on `ep`. Appends the
/// step record to the state's history and returns it.
inline StepRecord train_step(TrainState& state, const Dataset& ds, const Episode& ep, const RunConfig& config) {
    if (ep.n_way() != state.params.n_way())
        throw ConfigError("episode has " + std::to_string(ep.n_way()) + " classes, model expects " +
                          std::to_string(state.params.n_way()));
    const LossSettings settings = LossSettings::from(config);
    ad::ParamMap map = state.params.to_map();
    StepRecord rec;
    ad::Gradients grads;
    try {
        ad::Graph g;
        const ModelVars vars(ad::bind_parameters(g, map));
        EpisodeForward f = forward_episode(g, vars, ds, ep, settings, true);
        rec.loss = breakdown(f, settings);
        rec.floor_events = f.floor.count;
        rec.contrastive_signal = f.contrastive && f.contrastive->signal;
        grads = g.backward(*f.total);
    } catch (const NonFiniteError& e) {
        throw NonFiniteError("training step " + std::to_string(state.step()) + ": " + e.what());
    }
    adamw_step(map, grads, state.optim, adamw_config(config));
    state.params = ModelParams::from_map(map, state.params.variant);
    state.history.push_back(rec);
    return rec;
}

struct ValidationRecord {
    std::uint64_t step = 0;
    double auc = 0.0;
    double macro_f1 = 0.0;
};

struct TrainResult {
    TrainState final_state;
    TrainState best_state; ///< snapshot with the best validation AUC, or the final state
    std::optional<double> best_auc;
    std::vector<ValidationRecord> validations;
};

struct TrainHooks {
    std::function<void(std::uint64_t step, const StepRecord&)> on_step;
    std::function<void(const ValidationRecord&)> on_validation;
};

/// True when the validation split has enough classes for an episode.
inline bool can_validate(const Dataset& ds, const RunConfig& c) {
    return c.episodes_val > 0 && ds.classes_in(Split::Validation).size() >= c.n_way;
}

/// Runs training from `start` (or a fresh state) until config.episodes_train
/// steps have been taken. Validation runs every validate_every steps when a
/// validation split is available; the best-AUC snapshot is retained.
inline TrainResult train_loop(const RunConfig& config, const Dataset& ds, std::optional<TrainState> start = {},
                              const TrainHooks& hooks = {}) {
    config.validate();
    TrainResult result;
    result.final_state = start ? std::move(*start) : init_state(config);
    TrainState& state = result.final_state;
    if (state.params.n_way() != config.n_way)
        throw ConfigError("state has N=" + std::to_string(state.params.n_way()) +
                          " but episode.n_way=" + std::to_string(config.n_way));
    const bool validate = can_validate(ds, config);
    metrics::EvalOptions val;
    val.split = Split::Validation;
    val.n_way = config.n_way;
    val.k_shot = config.k_shot;
    val.q_per_class = config.q_per_class;
    val.shared_pair_fraction = config.shared_pair_fraction;
    val.episodes = config.episodes_val;
    val.runs = 1;
    val.seed = derive_seed(config.seed, 0x7A11DULL);
    val.workers = config.workers;

    while (state.step() < config.episodes_train) {
        const std::uint64_t step = state.step();
        const Episode ep = sample_mixed_episode(ds, Split::Train, config.n_way, config.k_shot, config.q_per_class,
                                                config.shared_pair_fraction, train_episode_seed(state.seed, step));
        const StepRecord rec = train_step(state, ds, ep, config);
        if (hooks.on_step) hooks.on_step(step, rec);
        if (validate && state.step() % config.validate_every == 0) {
            const auto report = metrics::evaluate(state.params, ds, val, LossSettings::from(config));
            ValidationRecord v{state.step(), report.auc.mean, report.macro_f1.mean};
            result.validations.push_back(v);
            if (hooks.on_validation) hooks.on_validation(v);
            if (!result.best_auc || v.auc > *result.best_auc) {
                result.best_auc = v.auc;
                result.best_state = state;
            }
        }
    }
    if (!result.best_auc) result.best_state = state;
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace ckpt {

inline constexpr char kMagic[4] = {'L', 'P', 'N', 'C'};
inline constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    void u32(std::uint32_t v) { le(v, 4); }
    void u64(std::uint64_t v) { le(v, 8); }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
    void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
    void tensor(const std::string& name, const Tensor& t) {
        u32(static_cast<std::uint32_t>(name.size()));
        bytes(name);
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto dim : t.shape()) u32(static_cast<std::uint32_t>(dim));
        for (double x : t.values()) f64(x);
    }
    std::vector<char>& buffer() { return out_; }

private:
    void le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    std::vector<char> out_;
};

class Reader {
public:
    explicit Reader(const std::vector<char>& in) : in_(in) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }
    double f64() { return std::bit_cast<double>(le(8)); }
    std::string text(std::size_t n) {
        need(n);
        std::string s(in_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::pair<std::string, Tensor> tensor() {
        std::string name = text(u32());
        const std::uint32_t rank = u32();
        if (rank == 0 || rank > 8) throw FormatError("checkpoint: tensor '" + name + "' has invalid rank");
        Shape shape(rank);
        std::size_t count = 1;
        for (auto& d : shape) {
            d = u32();
            count *= d;
        }
        need(count * 8);
        std::vector<double> data(count);
        for (auto& x : data) x = f64();
        return {std::move(name), Tensor(std::move(shape), std::move(data))};
    }
    bool at_end() const { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw FormatError("checkpoint: unexpected end of file");
    }
    std::uint64_t le(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + static_cast<std::size_t>(i)]))
                 << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    const std::vector<char>& in_;
    std::size_t pos_ = 0;
};

inline constexpr std::size_t kHistoryCols = 6;

} // namespace ckpt

struct Checkpoint {
    TrainState state;
    nlohmann::json config; ///< effective configuration echoed at save time
};

/// Layout: magic "LPNC", u32 version, u32 length + config JSON, u64 step,
/// u64 seed, u32 variant, u32 tensor count, then named tensors sorted by
/// name (u32 name length, name, u32 rank, u32 dims, f64 values).
inline std::vector<char> encode_checkpoint(const TrainState& s, const nlohmann::json& config) {
    ckpt::Writer w;
    w.bytes(std::string_view(ckpt::kMagic, 4));
    w.u32(ckpt::kVersion);
    const std::string cfg = config.dump();
    w.u32(static_cast<std::uint32_t>(cfg.size()));
    w.bytes(cfg);
    w.u64(s.optim.step);
    w.u64(s.seed);
    w.u32(static_cast<std::uint32_t>(s.params.variant));

    std::map<std::string, Tensor> blobs;
    for (const auto& [name, t] : s.params.to_map()) blobs.emplace("param/" + name, t);
    for (const auto& [name, t] : s.optim.m) blobs.emplace("adam_m/" + name, t);
    for (const auto& [name, t] : s.optim.v) blobs.emplace("adam_v/" + name, t);
    if (!s.history.empty()) {
        Tensor h({s.history.size(), ckpt::kHistoryCols});
        for (std::size_t i = 0; i < s.history.size(); ++i) {
            const auto& r = s.history[i];
            h(i, 0) = r.loss.lepn;
            h(i, 1) = r.loss.scl;
            h(i, 2) = r.loss.count;
            h(i, 3) = r.loss.total;
            h(i, 4) = static_cast<double>(r.floor_events);
            h(i, 5) = r.contrastive_signal ? 1.0 : 0.0;
        }
        blobs.emplace("history", std::move(h));
    }
    w.u32(static_cast<std::uint32_t>(blobs.size()));
    for (const auto& [name, t] : blobs) w.tensor(name, t);
    return std::move(w.buffer());
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes, double gamma = 0.0, double lambda = 0.0) {
    ckpt::Reader r(bytes);
    if (r.text(4) != std::string_view(ckpt::kMagic, 4)) throw FormatError("not a checkpoint file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != ckpt::kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(ckpt::kVersion) + ")");
    Checkpoint c;
    const std::string cfg = r.text(r.u32());
    try {
        c.config = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: config echo is not valid JSON: ") + e.what());
    }
    c.state.optim.step = r.u64();
    c.state.seed = r.u64();
    const std::uint32_t variant = r.u32();
    if (variant > static_cast<std::uint32_t>(Variant::WW)) throw FormatError("checkpoint: unknown variant");

    ad::ParamMap params;
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, t] = r.tensor();
        if (name.starts_with("param/")) params.emplace(name.substr(6), std::move(t));
        else if (name.starts_with("adam_m/")) c.state.optim.m.emplace(name.substr(7), std::move(t));
        else if (name.starts_with("adam_v/")) c.state.optim.v.emplace(name.substr(7), std::move(t));
        else if (name == "history") {
            if (t.rank() != 2 || t.cols() != ckpt::kHistoryCols) throw FormatError("checkpoint: malformed history");
            for (std::size_t row = 0; row < t.rows(); ++row) {
                StepRecord rec;
                rec.loss = {t(row, 0), t(row, 1), t(row, 2), t(row, 3), gamma, lambda};
                rec.floor_events = static_cast<std::size_t>(t(row, 4));
                rec.contrastive_signal = t(row, 5) != 0.0;
                c.state.history.push_back(rec);
            }
        } else {
            throw FormatError("checkpoint: unexpected tensor '" + name + "'");
        }
    }
    if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
    c.state.params = ModelParams::from_map(params, static_cast<Variant>(variant));
    for (const auto* moments : {&c.state.optim.m, &c.state.optim.v})
        for (const auto& [name, t] : *moments) {
            auto it = params.find(name);
            if (it == params.end() || it->second.shape() != t.shape())
                throw FormatError("checkpoint: optimizer moment '" + name + "' does not match any parameter");
        }
    if (c.config.contains("loss")) {
        const auto& loss = c.config["loss"];
        const double g = loss.value("gamma", gamma), l = loss.value("lambda", lambda);
        const double eff_g = c.state.params.variant == Variant::WW ? g : 0.0;
        for (auto& rec : c.state.history) {
            rec.loss.gamma = eff_g;
            rec.loss.lambda = l;
        }
    }
    return c;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + path.string());
}

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const TrainState& s, const nlohmann::json& config, const std::filesystem::path& path) {
    write_bytes(path, encode_checkpoint(s, config));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_bytes(path)); }

/// Rejects checkpoints whose shapes disagree with the configuration.
inline void check_compatible(const TrainState& s, const RunConfig& c) {
    const auto& p = s.params;
    if (p.n_way() != c.n_way)
        throw ConfigError("checkpoint was trained for N=" + std::to_string(p.n_way()) +
                          " classes but episode.n_way=" + std::to_string(c.n_way));
    if (p.d() != c.d) throw ConfigError("checkpoint has d=" + std::to_string(p.d()) + " but model.d=" + std::to_string(c.d));
    if (p.encoder.hidden() != c.d_hidden || p.encoder.heads() != c.r_heads || p.bilinear.u.cols() != c.k_rank)
        throw ConfigError("checkpoint shapes do not match model.d_hidden / model.r_heads / model.k_rank");
    if (p.variant != c.variant)
        throw ConfigError(std::string("checkpoint variant is ") + variant_name(p.variant) + " but model.variant=" +
                          variant_name(c.variant));
}

} // namespace lpn
