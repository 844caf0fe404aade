// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpn/model.hpp"

namespace lpn::metrics {

/// Probability that a random positive outscores a random negative, ties
/// counted half (Mann-Whitney rank statistic with midranks). nullopt when
/// the labels contain only one class.
inline std::optional<double> auc_binary(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ShapeError("auc_binary: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double positive_rank_sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j); // mean of ranks i+1 .. j
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]]) {
                positive_rank_sum += midrank;
                ++positives;
            }
        i = j;
    }
    const std::size_t negatives = n - positives;
    if (positives == 0 || negatives == 0) return std::nullopt;
    const double p = static_cast<double>(positives);
    return (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

/// Unweighted mean over columns of per-class F1 = 2PR/(P+R), 0 when P+R = 0.
inline double macro_f1(const Tensor& pred, const Tensor& truth) {
    if (pred.shape() != truth.shape()) throw ShapeError("macro_f1: shape mismatch");
    const std::size_t q = pred.rows(), n = pred.cols();
    if (n == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t r = 0; r < q; ++r) {
            const bool p = pred(r, i) != 0.0, t = truth(r, i) != 0.0;
            tp += p && t;
            fp += p && !t;
            fn += !p && t;
        }
        const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        total += precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    return total / static_cast<double>(n);
}

struct EpisodeMetrics {
    std::optional<double> auc; ///< nullopt when every class column is single-valued
    double macro_f1 = 0.0;
    double count_accuracy = 0.0;
    std::size_t queries = 0;
    std::size_t auc_classes = 0; ///< classes that entered the AUC average
};

/// Scores one episode from explicit query class probabilities and count
/// distributions (both |Q| x N) against the |Q| x N label matrix.
inline EpisodeMetrics score_episode(const Tensor& probs, const Tensor& count_probs, const Tensor& labels) {
    if (probs.shape() != labels.shape() || count_probs.shape() != labels.shape())
        throw ShapeError("score_episode: probability and label shapes differ");
    const std::size_t q = labels.rows(), n = labels.cols();
    EpisodeMetrics m;
    m.queries = q;

    double auc_sum = 0.0;
    std::vector<double> column(q);
    std::vector<std::uint8_t> truth(q);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r < q; ++r) {
            column[r] = probs(r, i);
            truth[r] = labels(r, i) != 0.0;
        }
        if (auto a = auc_binary(column, truth)) {
            auc_sum += *a;
            ++m.auc_classes;
        }
    }
    if (m.auc_classes > 0) m.auc = auc_sum / static_cast<double>(m.auc_classes);

    Tensor pred({q, n});
    std::size_t correct_counts = 0;
    for (std::size_t r = 0; r < q; ++r) {
        const auto p = probs.row_at(r), c = count_probs.row_at(r);
        for (auto i : inference::predict_labels(p.data(), c.data())) pred(r, i) = 1.0;
        std::size_t true_count = 0;
        for (std::size_t i = 0; i < n; ++i) true_count += labels(r, i) != 0.0;
        correct_counts += inference::predicted_count(c.data()) == std::min(std::max<std::size_t>(true_count, 1), n);
    }
    m.macro_f1 = macro_f1(pred, labels);
    m.count_accuracy = q > 0 ? static_cast<double>(correct_counts) / static_cast<double>(q) : 0.0;
    return m;
}

/// Runs the model on one episode without building loss terms.
inline EpisodeMetrics evaluate_episode(const ModelParams& params, const Dataset& ds, const Episode& ep,
                                       const LossSettings& settings) {
    ad::Graph g;
    const ModelVars vars(ad::bind_parameters(g, params.to_map()));
    const EpisodeForward f = forward_episode(g, vars, ds, ep, settings, false);
    return score_episode(f.query_probs.value(), f.query_count_probs.value(), episode_label_matrix(ep));
}

struct EvalOptions {
    Split split = Split::Test;
    std::size_t n_way = 5, k_shot = 5, q_per_class = 5;
    double shared_pair_fraction = 0.0;
    std::size_t episodes = 600;
    std::size_t runs = 5;
    std::uint64_t seed = 1;
    std::size_t workers = 1;

    static EvalOptions from(const RunConfig& c, Split split = Split::Test) {
        return {split, c.n_way, c.k_shot, c.q_per_class, c.shared_pair_fraction, c.episodes_eval, c.runs, c.seed,
                c.workers};
    }
};

/// Seed of episode `e` in run `r` of an evaluation.
inline std::uint64_t eval_episode_seed(std::uint64_t base, std::size_t run, std::size_t episode) {
    return derive_seed(derive_seed(base, 0xE7A10000ULL + run), episode);
}

struct EpisodeRecord {
    std::size_t run = 0;
    std::size_t episode = 0;
    EpisodeMetrics metrics;
};

struct Summary {
    double mean = 0.0;
    double std_episodes = 0.0; ///< population std over episodes
    double std_runs = 0.0;     ///< population std over per-run means
};

struct RunMeans {
    double auc = 0.0, macro_f1 = 0.0, count_accuracy = 0.0;
};

struct EvalReport {
    Split split = Split::Test;
    Variant variant = Variant::WW;
    std::size_t runs = 0;
    std::size_t episodes = 0; ///< per run
    std::vector<EpisodeRecord> per_episode;
    std::vector<RunMeans> per_run;
    Summary auc, macro_f1, count_accuracy;
    std::size_t auc_skipped = 0; ///< episodes without any usable AUC column
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

inline Summary summarize(const std::vector<double>& all, const std::vector<double>& run_means) {
    return {mean_of(all), std_of(all), std_of(run_means)};
}

} // namespace detail

/// Aggregates records in their stored (run, episode) order.
inline void aggregate(EvalReport& report) {
    std::vector<double> auc, f1, cnt;
    std::vector<double> run_auc, run_f1, run_cnt;
    report.per_run.assign(report.runs, {});
    report.auc_skipped = 0;
    for (std::size_t r = 0; r < report.runs; ++r) {
        std::vector<double> a, f, c;
        for (const auto& rec : report.per_episode) {
            if (rec.run != r) continue;
            if (rec.metrics.auc) a.push_back(*rec.metrics.auc);
            else ++report.auc_skipped;
            f.push_back(rec.metrics.macro_f1);
            c.push_back(rec.metrics.count_accuracy);
        }
        report.per_run[r] = {detail::mean_of(a), detail::mean_of(f), detail::mean_of(c)};
        run_auc.push_back(report.per_run[r].auc);
        run_f1.push_back(report.per_run[r].macro_f1);
        run_cnt.push_back(report.per_run[r].count_accuracy);
        auc.insert(auc.end(), a.begin(), a.end());
        f1.insert(f1.end(), f.begin(), f.end());
        cnt.insert(cnt.end(), c.begin(), c.end());
    }
    report.auc = detail::summarize(auc, run_auc);
    report.macro_f1 = detail::summarize(f1, run_f1);
    report.count_accuracy = detail::summarize(cnt, run_cnt);
}

/// Episodic evaluation over `runs` x `episodes` sampled episodes. Episodes
/// are spread over `workers` threads; results land in fixed slots, so the
/// report does not depend on the worker count.
inline EvalReport evaluate(const ModelParams& params, const Dataset& ds, const EvalOptions& opt,
                           const LossSettings& settings) {
    if (opt.runs == 0) throw ConfigError("schedule.runs must be positive");
    EvalReport report;
    report.split = opt.split;
    report.variant = settings.variant;
    report.runs = opt.runs;
    report.episodes = opt.episodes;
    const std::size_t total = opt.runs * opt.episodes;
    report.per_episode.resize(total);

    std::vector<std::exception_ptr> errors(std::max<std::size_t>(opt.workers, 1));
    auto work = [&](std::size_t worker, std::size_t stride) {
        try {
            for (std::size_t i = worker; i < total; i += stride) {
                const std::size_t run = i / opt.episodes, e = i % opt.episodes;
                const Episode ep = sample_mixed_episode(ds, opt.split, opt.n_way, opt.k_shot, opt.q_per_class,
                                                        opt.shared_pair_fraction, eval_episode_seed(opt.seed, run, e));
                report.per_episode[i] = {run, e, evaluate_episode(params, ds, ep, settings)};
            }
        } catch (...) {
            errors[worker] = std::current_exception();
        }
    };
    const std::size_t workers = std::min<std::size_t>(std::max<std::size_t>(opt.workers, 1), std::max<std::size_t>(total, 1));
    if (workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    aggregate(report);
    return report;
}

inline nlohmann::json summary_json(const Summary& s) {
    return {{"mean", s.mean}, {"std_episodes", s.std_episodes}, {"std_runs", s.std_runs}};
}

inline nlohmann::json episode_json(const EpisodeRecord& r) {
    nlohmann::json j{{"record", "episode"}, {"run", r.run}, {"episode", r.episode}};
    j["auc"] = r.metrics.auc ? nlohmann::json(*r.metrics.auc) : nlohmann::json(nullptr);
    j["auc_classes"] = r.metrics.auc_classes;
    j["macro_f1"] = r.metrics.macro_f1;
    j["count_accuracy"] = r.metrics.count_accuracy;
    j["queries"] = r.metrics.queries;
    return j;
}

inline nlohmann::json aggregate_json(const EvalReport& r, const nlohmann::json& config) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& m : r.per_run)
        runs.push_back({{"auc", m.auc}, {"macro_f1", m.macro_f1}, {"count_accuracy", m.count_accuracy}});
    return {{"record", "aggregate"},
            {"split", split_name(r.split)},
            {"variant", variant_name(r.variant)},
            {"variant_description", variant_description(r.variant)},
            {"runs", r.runs},
            {"episodes_per_run", r.episodes},
            {"auc", summary_json(r.auc)},
            {"macro_f1", summary_json(r.macro_f1)},
            {"count_accuracy", summary_json(r.count_accuracy)},
            {"auc_skipped_episodes", r.auc_skipped},
            {"per_run", runs},
            {"config", config}};
}

/// One JSON object per line: every episode record, then the aggregate.
inline void write_report(const EvalReport& r, const nlohmann::json& config, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write report " + path.string());
    for (const auto& rec : r.per_episode) out << episode_json(rec).dump() << '\n';
    out << aggregate_json(r, config).dump() << '\n';
    if (!out) throw Error("failed writing report " + path.string());
}

} // namespace lpn::metrics
