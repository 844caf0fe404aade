// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lpn/synthetic.hpp"
#include "lpn/trainer.hpp"

namespace lpn::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

/// A configuration file together with the directory its relative paths
/// are resolved against.
struct LoadedConfig {
    RunConfig config; ///< as written (echoed into artifacts)
    fs::path base;

    fs::path resolve(const std::string& p) const {
        if (p.empty()) return {};
        const fs::path path(p);
        return path.is_absolute() ? path : base / path;
    }
};

inline LoadedConfig load(const fs::path& config_path) {
    LoadedConfig c{load_config(config_path), config_path.parent_path()};
    if (c.base.empty()) c.base = ".";
    return c;
}

inline Dataset load_data(const LoadedConfig& c) {
    if (c.config.dataset.empty()) throw ConfigError("paths.dataset: no dataset file configured");
    const fs::path path = c.resolve(c.config.dataset);
    if (!fs::exists(path)) throw ConfigError("paths.dataset: file not found: " + path.string());
    std::optional<fs::path> splits;
    if (!c.config.splits.empty()) splits = c.resolve(c.config.splits);
    Dataset ds = load_dataset(path, splits);
    if (ds.d != c.config.d)
        throw ConfigError("model.d=" + std::to_string(c.config.d) + " but the dataset has d=" + std::to_string(ds.d));
    return ds;
}

/// Runs `body`, mapping exceptions to exit codes: configuration problems to
/// 2, everything else to 1.
template <class F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kFailure;
    }
}

inline nlohmann::json step_json(std::uint64_t step, const StepRecord& r) {
    return {{"record", "step"},         {"step", step},
            {"lepn", r.loss.lepn},      {"scl", r.loss.scl},
            {"count", r.loss.count},    {"total", r.loss.total},
            {"floor_events", r.floor_events}, {"contrastive_signal", r.contrastive_signal}};
}

struct TrainOptions {
    fs::path config;
    std::optional<fs::path> resume;
};

/// Trains and writes the best checkpoint (paths.checkpoint), the final
/// state (paths.checkpoint + ".last") and a JSONL loss log (paths.train_log).
inline int cmd_train(const TrainOptions& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const LoadedConfig lc = load(opt.config);
        const RunConfig& cfg = lc.config;
        const Dataset ds = load_data(lc);
        const nlohmann::json echo = config_to_json(cfg);

        std::optional<TrainState> start;
        if (opt.resume) {
            Checkpoint c = load_checkpoint(*opt.resume);
            check_compatible(c.state, cfg);
            start = std::move(c.state);
        }
        const fs::path log_path = lc.resolve(cfg.train_log);
        if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
        std::ofstream log(log_path, std::ios::binary);
        if (!log) throw Error("cannot write training log " + log_path.string());
        log << nlohmann::json{{"record", "config"}, {"config", echo}}.dump() << '\n';

        TrainHooks hooks;
        hooks.on_step = [&](std::uint64_t step, const StepRecord& r) { log << step_json(step, r).dump() << '\n'; };
        hooks.on_validation = [&](const ValidationRecord& v) {
            log << nlohmann::json{{"record", "validation"}, {"step", v.step}, {"auc", v.auc}, {"macro_f1", v.macro_f1}}
                       .dump()
                << '\n';
            out << "validation @" << v.step << ": auc " << v.auc << ", macro-f1 " << v.macro_f1 << '\n';
        };
        const auto t0 = std::chrono::steady_clock::now();
        TrainResult result = train_loop(cfg, ds, std::move(start), hooks);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        const fs::path ckpt = lc.resolve(cfg.checkpoint);
        save_checkpoint(result.best_state, echo, ckpt);
        save_checkpoint(result.final_state, echo, fs::path(ckpt.string() + ".last"));
        if (!log) throw Error("failed writing training log " + log_path.string());

        out << "variant " << variant_name(cfg.variant) << ": " << result.final_state.step() << " episodes in " << secs
            << " s\n";
        if (!result.final_state.history.empty())
            out << "final episode loss " << result.final_state.history.back().loss.total << '\n';
        if (result.best_auc) out << "best validation auc " << *result.best_auc << " at step " << result.best_state.step() << '\n';
        out << "checkpoint written to " << ckpt.string() << '\n';
        return kOk;
    });
}

struct EvalCmdOptions {
    fs::path config;
    std::optional<fs::path> checkpoint;
    std::optional<fs::path> report;
    Split split = Split::Test;
};

inline int cmd_eval(const EvalCmdOptions& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const LoadedConfig lc = load(opt.config);
        const RunConfig& cfg = lc.config;
        const Dataset ds = load_data(lc);
        const Checkpoint c = load_checkpoint(opt.checkpoint ? *opt.checkpoint : lc.resolve(cfg.checkpoint));
        check_compatible(c.state, cfg);

        const auto report = metrics::evaluate(c.state.params, ds, metrics::EvalOptions::from(cfg, opt.split),
                                              LossSettings::from(cfg));
        const fs::path report_path = opt.report ? *opt.report : lc.resolve(cfg.report);
        if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
        metrics::write_report(report, config_to_json(cfg), report_path);

        char line[256];
        out << "variant " << variant_name(report.variant) << " (" << variant_description(report.variant) << ")\n";
        std::snprintf(line, sizeof line, "%s split: %zu run(s) x %zu episodes\n", split_name(report.split),
                      report.runs, report.episodes);
        out << line;
        std::snprintf(line, sizeof line, "AUC            %.4f +- %.4f\nmacro-F1       %.4f +- %.4f\n",
                      report.auc.mean, report.auc.std_runs, report.macro_f1.mean, report.macro_f1.std_runs);
        out << line;
        std::snprintf(line, sizeof line, "count accuracy %.4f +- %.4f\n", report.count_accuracy.mean,
                      report.count_accuracy.std_runs);
        out << line;
        if (report.auc_skipped)
            out << report.auc_skipped << " episode(s) had no class with both positive and negative queries\n";
        out << "report written to " << report_path.string() << '\n';
        return kOk;
    });
}

struct GradcheckOptions {
    std::optional<fs::path> config;
    std::optional<std::string> variant;
    std::uint64_t seed = 1;
    double tolerance = 1e-4;
    std::optional<std::string> corrupt_backward;
};

/// Parameter group of a "<group>.<name>" key.
inline std::string param_group(const std::string& name) { return name.substr(0, name.find('.')); }

/// The fixed gradient-check problem: a 3-way 2-shot episode over d = 8
/// token embeddings, 5 tokens per sentence, with up to two aspects per
/// sentence so that the contrastive term has positives.
struct GradcheckProblem {
    Dataset data;
    Episode episode;
    ModelParams params;
    LossSettings settings;
};

inline GradcheckProblem gradcheck_problem(const RunConfig& base, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.d = 8;
    spec.train_classes = 0;
    spec.test_classes = 3;
    spec.sentences_per_class = 6;
    spec.min_tokens = spec.max_tokens = 5;
    spec.description_tokens = 2;
    spec.aspect_weights = {0.5, 0.5};
    GradcheckProblem p;
    p.data = generate_synthetic(spec, seed);
    p.episode = sample_episode(p.data, Split::Test, 3, 2, 2, seed);
    RunConfig small = base;
    small.n_way = 3;
    small.k_shot = 2;
    small.d = 8;
    small.d_hidden = 6;
    small.r_heads = 2;
    small.k_rank = 3;
    p.params = init_params(small, seed);
    p.settings = LossSettings::from(small);
    return p;
}

inline int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        RunConfig cfg = opt.config ? load(*opt.config).config : RunConfig{};
        if (opt.variant) cfg.variant = parse_variant(*opt.variant);
        ad::GradCheckOptions gopt;
        if (opt.corrupt_backward) {
            gopt.corrupt_backward = ad::op_from_name(*opt.corrupt_backward);
            if (!gopt.corrupt_backward) throw ConfigError("unknown operator '" + *opt.corrupt_backward + "'");
        }
        const auto t0 = std::chrono::steady_clock::now();
        const GradcheckProblem p = gradcheck_problem(cfg, opt.seed);
        const auto report = ad::grad_check(episode_loss_builder(p.data, p.episode, p.settings), p.params.to_map(),
                                           opt.tolerance, gopt);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        struct Group {
            double max_rel = 0.0;
            bool used = false;
        };
        std::map<std::string, Group> groups;
        char line[160];
        out << "gradient check: variant " << variant_name(cfg.variant) << ", 3-way 2-shot, d=8, T=5, tolerance "
            << opt.tolerance << '\n';
        for (const auto& pc : report.params) {
            auto& g = groups[param_group(pc.name)];
            g.used = g.used || pc.used;
            if (pc.used) g.max_rel = std::max(g.max_rel, pc.max_rel_error);
            if (pc.used)
                std::snprintf(line, sizeof line, "  %-18s %4zu entries  max rel err %.3e\n", pc.name.c_str(),
                              pc.entries, pc.max_rel_error);
            else
                std::snprintf(line, sizeof line, "  %-18s %4zu entries  unused\n", pc.name.c_str(), pc.entries);
            out << line;
        }
        bool ok = true;
        for (const auto& [name, g] : groups) {
            if (!g.used) {
                std::snprintf(line, sizeof line, "group %-12s unused\n", name.c_str());
            } else {
                const bool pass = g.max_rel <= opt.tolerance;
                ok = ok && pass;
                std::snprintf(line, sizeof line, "group %-12s max rel err %.3e  %s\n", name.c_str(), g.max_rel,
                              pass ? "PASS" : "FAIL");
            }
            out << line;
        }
        std::snprintf(line, sizeof line, "%s in %.2f s\n", ok ? "PASS" : "FAIL", secs);
        out << line;
        return ok ? kOk : kFailure;
    });
}

struct GenOptions {
    fs::path out;
    std::optional<fs::path> spec_file;
    SyntheticSpec spec;
    std::uint64_t seed = 1;
};

inline int cmd_gen_synthetic(const GenOptions& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        SyntheticSpec spec = opt.spec;
        if (opt.spec_file) {
            std::ifstream in(*opt.spec_file);
            if (!in) throw ConfigError("cannot open spec file " + opt.spec_file->string());
            nlohmann::json j;
            try {
                in >> j;
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError("spec file is not valid JSON: " + std::string(e.what()));
            }
            spec = synthetic_spec_from_json(j);
        }
        const Dataset ds = generate_synthetic(spec, opt.seed);
        if (opt.out.has_parent_path()) fs::create_directories(opt.out.parent_path());
        save_dataset(ds, opt.out);
        out << "wrote " << ds.sentences.size() << " sentences, " << ds.labels.size() << " labels (d=" << ds.d
            << ") to " << opt.out.string() << '\n';
        nlohmann::json echo = spec;
        echo["seed"] = opt.seed;
        out << "spec " << echo.dump() << '\n';
        return kOk;
    });
}

struct ExportOptions {
    fs::path config;
    std::optional<fs::path> checkpoint;
    std::size_t episodes = 1;
    fs::path out;
    Split split = Split::Test;
};

/// Seed of export episode `e`.
inline std::uint64_t export_episode_seed(std::uint64_t seed, std::size_t e) {
    return derive_seed(derive_seed(seed, 0xE4907ULL), e);
}

/// CSV: header, then one row per (episode, class) with the d prototype
/// coordinates. The effective config goes to "<out>.config.json".
inline int cmd_export_prototypes(const ExportOptions& opt, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const LoadedConfig lc = load(opt.config);
        const RunConfig& cfg = lc.config;
        const Dataset ds = load_data(lc);
        const Checkpoint c = load_checkpoint(opt.checkpoint ? *opt.checkpoint : lc.resolve(cfg.checkpoint));
        check_compatible(c.state, cfg);
        const LossSettings settings = LossSettings::from(cfg);

        if (opt.out.has_parent_path()) fs::create_directories(opt.out.parent_path());
        std::ofstream csv(opt.out, std::ios::binary);
        if (!csv) throw Error("cannot write " + opt.out.string());
        csv << "episode,class_id";
        for (std::size_t i = 0; i < cfg.d; ++i) csv << ",p" << i;
        csv << '\n';
        char num[32];
        for (std::size_t e = 0; e < opt.episodes; ++e) {
            const Episode ep = sample_mixed_episode(ds, opt.split, cfg.n_way, cfg.k_shot, cfg.q_per_class,
                                                    cfg.shared_pair_fraction, export_episode_seed(cfg.seed, e));
            ad::Graph g;
            const ModelVars vars(ad::bind_parameters(g, c.state.params.to_map()));
            const Tensor protos = forward_episode(g, vars, ds, ep, settings, false).prototypes.value();
            for (std::size_t i = 0; i < ep.n_way(); ++i) {
                csv << e << ',' << ep.class_ids[i];
                for (std::size_t k = 0; k < protos.cols(); ++k) {
                    std::snprintf(num, sizeof num, ",%.17g", protos(i, k));
                    csv << num;
                }
                csv << '\n';
            }
        }
        if (!csv) throw Error("failed writing " + opt.out.string());
        std::ofstream echo(opt.out.string() + ".config.json", std::ios::binary);
        echo << config_to_json(cfg).dump(2) << '\n';
        out << "wrote " << opt.episodes * cfg.n_way << " prototype rows to " << opt.out.string() << '\n';
        return kOk;
    });
}

inline int cmd_inspect_dataset(const fs::path& path, const std::optional<fs::path>& splits, std::ostream& out,
                               std::ostream& err) {
    return guarded(err, [&] {
        const Dataset ds = load_dataset(path, splits);
        out << path.string() << ": d=" << ds.d << ", " << ds.labels.size() << " labels, " << ds.sentences.size()
            << " sentences\n";
        for (Split s : {Split::Train, Split::Validation, Split::Test}) {
            const auto classes = ds.classes_in(s);
            std::size_t sentences = 0;
            for (const auto& sent : ds.sentences)
                if (!sent.labels.empty() && ds.split.count(sent.labels.front()) &&
                    ds.split.at(sent.labels.front()) == s)
                    ++sentences;
            out << "  " << split_name(s) << ": " << classes.size() << " classes, " << sentences << " sentences\n";
        }
        std::map<std::size_t, std::size_t> aspects, lengths;
        for (const auto& s : ds.sentences) {
            ++aspects[s.labels.size()];
            ++lengths[s.length()];
        }
        out << "  aspects per sentence:";
        for (const auto& [k, n] : aspects) out << ' ' << k << ':' << n;
        out << "\n  tokens per sentence:";
        for (const auto& [k, n] : lengths) out << ' ' << k << ':' << n;
        out << '\n';
        return kOk;
    });
}

/// Command-line entry point.
inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Label-enhanced prototypical network for multi-label few-shot aspect category detection", "lpn"};
    app.require_subcommand(1);

    TrainOptions train;
    std::string resume;
    auto* c_train = app.add_subcommand("train", "Episodic training");
    c_train->add_option("config", train.config, "Run configuration (JSON)")->required();
    c_train->add_option("--resume", resume, "Continue from a checkpoint");

    EvalCmdOptions eval;
    std::string eval_ckpt, eval_report, eval_split = "test";
    auto* c_eval = app.add_subcommand("eval", "Episodic evaluation");
    c_eval->add_option("config", eval.config, "Run configuration (JSON)")->required();
    c_eval->add_option("--checkpoint", eval_ckpt, "Checkpoint (default: paths.checkpoint)");
    c_eval->add_option("--report", eval_report, "Report path (default: paths.report)");
    c_eval->add_option("--split", eval_split, "train, validation or test");

    GradcheckOptions gc;
    std::string gc_config, gc_variant, gc_corrupt;
    auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of the total loss gradient");
    c_gc->add_option("--config", gc_config, "Take variant and loss weights from this configuration");
    c_gc->add_option("--variant", gc_variant, "oo, wo or ww");
    c_gc->add_option("--seed", gc.seed, "Seed of the random problem");
    c_gc->add_option("--tolerance", gc.tolerance, "Maximum relative error");
    c_gc->add_option("--corrupt-backward", gc_corrupt, "Negate one operator's backward rule")->group("");

    GenOptions gen;
    std::string gen_spec;
    auto* c_gen = app.add_subcommand("gen-synthetic", "Write a synthetic dataset");
    c_gen->add_option("--out", gen.out, "Output LPND file")->required();
    c_gen->add_option("--spec", gen_spec, "Generator spec (JSON); overrides the flags below");
    c_gen->add_option("--seed", gen.seed);
    c_gen->add_option("--d", gen.spec.d);
    c_gen->add_option("--train-classes", gen.spec.train_classes);
    c_gen->add_option("--validation-classes", gen.spec.validation_classes);
    c_gen->add_option("--test-classes", gen.spec.test_classes);
    c_gen->add_option("--sentences-per-class", gen.spec.sentences_per_class);
    c_gen->add_option("--min-tokens", gen.spec.min_tokens);
    c_gen->add_option("--max-tokens", gen.spec.max_tokens);
    c_gen->add_option("--description-tokens", gen.spec.description_tokens);
    c_gen->add_option("--sigma-between", gen.spec.sigma_between);
    c_gen->add_option("--sigma-within", gen.spec.sigma_within);
    c_gen->add_option("--aspect-weights", gen.spec.aspect_weights, "Relative frequency of 1, 2, ... aspects");
    std::string gen_mixing;
    c_gen->add_option("--aspect-mixing", gen_mixing, "round_robin or random");

    ExportOptions exp;
    std::string exp_ckpt, exp_split = "test";
    auto* c_exp = app.add_subcommand("export-prototypes", "Write per-episode prototypes as CSV");
    c_exp->add_option("config", exp.config, "Run configuration (JSON)")->required();
    c_exp->add_option("--checkpoint", exp_ckpt);
    c_exp->add_option("--episodes", exp.episodes);
    c_exp->add_option("--out", exp.out)->required();
    c_exp->add_option("--split", exp_split);

    std::string inspect_path, inspect_splits;
    auto* c_ins = app.add_subcommand("inspect-dataset", "Summarize an LPND file");
    c_ins->add_option("dataset", inspect_path)->required();
    c_ins->add_option("--splits", inspect_splits, "Split sidecar (default: <dataset>.splits.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    }

    auto parse_split_arg = [&](const std::string& s, Split& dst) {
        try {
            dst = parse_split(s);
            return true;
        } catch (const std::exception& e) {
            err << "error: " << e.what() << '\n';
            return false;
        }
    };

    if (*c_train) {
        if (!resume.empty()) train.resume = resume;
        return cmd_train(train, out, err);
    }
    if (*c_eval) {
        if (!eval_ckpt.empty()) eval.checkpoint = eval_ckpt;
        if (!eval_report.empty()) eval.report = eval_report;
        if (!parse_split_arg(eval_split, eval.split)) return kUsage;
        return cmd_eval(eval, out, err);
    }
    if (*c_gc) {
        if (!gc_config.empty()) gc.config = gc_config;
        if (!gc_variant.empty()) gc.variant = gc_variant;
        if (!gc_corrupt.empty()) gc.corrupt_backward = gc_corrupt;
        return cmd_gradcheck(gc, out, err);
    }
    if (*c_gen) {
        if (!gen_spec.empty()) gen.spec_file = gen_spec;
        if (!gen_mixing.empty()) {
            try {
                gen.spec.aspect_mixing = parse_mixing(gen_mixing);
            } catch (const ConfigError& e) {
                err << "error: " << e.what() << '\n';
                return kUsage;
            }
        }
        return cmd_gen_synthetic(gen, out, err);
    }
    if (*c_exp) {
        if (!exp_ckpt.empty()) exp.checkpoint = exp_ckpt;
        if (!parse_split_arg(exp_split, exp.split)) return kUsage;
        return cmd_export_prototypes(exp, out, err);
    }
    if (*c_ins) {
        std::optional<fs::path> splits;
        if (!inspect_splits.empty()) splits = inspect_splits;
        return cmd_inspect_dataset(inspect_path, splits, out, err);
    }
    return kUsage;
}

} // namespace lpn::cli
