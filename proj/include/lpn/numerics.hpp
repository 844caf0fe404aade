// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>

#include "lpn/autodiff.hpp"

namespace lpn {

/// Lower bound applied to probabilities inside a log.
inline constexpr double kProbFloor = 1e-12;

/// Counts how often a probability was clamped to kProbFloor.
struct FloorEvents {
    std::size_t count = 0;
};

/// Applies the probability floor to log-probabilities at the entries selected
/// by `mask`: any selected log p below log(kProbFloor) is replaced by that
/// constant (which carries no gradient). Returns `log_probs` unchanged when
/// nothing is clamped.
inline ad::Var floor_log_probs(ad::Var log_probs, const Tensor& mask, FloorEvents& events) {
    const Tensor& lp = log_probs.value();
    const double floor = std::log(kProbFloor);
    Tensor keep(lp.shape(), 1.0);
    Tensor fill(lp.shape(), 0.0);
    std::size_t clamped = 0;
    for (std::size_t i = 0; i < lp.size(); ++i) {
        if (mask[i] != 0.0 && lp[i] < floor) {
            keep[i] = 0.0;
            fill[i] = floor;
            ++clamped;
        }
    }
    if (clamped == 0) return log_probs;
    events.count += clamped;
    ad::Graph& g = *log_probs.graph();
    return ad::add(ad::mul(log_probs, g.constant(std::move(keep))), g.constant(std::move(fill)));
}

} // namespace lpn
