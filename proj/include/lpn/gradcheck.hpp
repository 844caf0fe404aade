// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lpn/autodiff.hpp"

namespace lpn::ad {

using ParamMap = std::map<std::string, Tensor>;
using BoundParams = std::map<std::string, Var>;

/// Builds a scalar loss on `graph` from parameter leaves already bound in it.
using LossBuilder = std::function<Var(Graph& graph, const BoundParams& params)>;

inline BoundParams bind_parameters(Graph& graph, const ParamMap& params) {
    BoundParams bound;
    for (const auto& [name, value] : params) bound.emplace(name, graph.parameter(name, value));
    return bound;
}

struct ParamCheck {
    std::string name;
    std::size_t entries = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    /// False when the loss does not depend on this parameter at all.
    bool used = true;
};

struct GradCheckReport {
    double tolerance = 0.0;
    std::vector<ParamCheck> params;

    bool passed() const {
        return std::all_of(params.begin(), params.end(),
                           [&](const ParamCheck& p) { return !p.used || p.max_rel_error <= tolerance; });
    }

    double max_rel_error() const {
        double m = 0.0;
        for (const auto& p : params)
            if (p.used) m = std::max(m, p.max_rel_error);
        return m;
    }
};

struct GradCheckOptions {
    double step = 1e-5;
    /// Flip the sign of one backward rule in the analytic pass.
    std::optional<Op> corrupt_backward;
};

/// |a - b| / max(1e-8, |a| + |b|)
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compares reverse-mode gradients with central finite differences for every
/// scalar entry of every parameter.
inline GradCheckReport grad_check(const LossBuilder& build, const ParamMap& params, double tolerance,
                                  const GradCheckOptions& options = {}) {
    Gradients analytic;
    std::map<std::string, bool> reached;
    {
        Graph graph;
        graph.corrupt_backward(options.corrupt_backward);
        const BoundParams bound = bind_parameters(graph, params);
        Var loss = build(graph, bound);
        analytic = graph.backward(loss);
        for (const auto& [name, v] : bound) reached[name] = graph.reached(v);
    }

    auto evaluate = [&](const ParamMap& p) {
        Graph graph;
        const BoundParams bound = bind_parameters(graph, p);
        return build(graph, bound).value().item();
    };

    GradCheckReport report;
    report.tolerance = tolerance;
    ParamMap work = params;
    for (const auto& [name, value] : params) {
        ParamCheck check;
        check.name = name;
        check.entries = value.size();
        check.used = reached.at(name);
        if (check.used) {
            Tensor& slot = work.at(name);
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double original = slot[i];
                slot[i] = original + options.step;
                const double up = evaluate(work);
                slot[i] = original - options.step;
                const double down = evaluate(work);
                slot[i] = original;
                const double numeric = (up - down) / (2.0 * options.step);
                const double a = analytic.at(name)[i];
                check.max_rel_error = std::max(check.max_rel_error, relative_error(a, numeric));
                check.max_abs_error = std::max(check.max_abs_error, std::abs(a - numeric));
            }
        }
        report.params.push_back(check);
    }
    return report;
}

} // namespace lpn::ad
