// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "lpn/random.hpp"
#include "lpn/tensor.hpp"

namespace lpn {

/// rows x cols matrix drawn from uniform(-s, s), s = sqrt(6 / (fan_in + fan_out)),
/// where fan_in = cols and fan_out = rows.
inline Tensor glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
    const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Tensor t({rows, cols});
    for (double& x : t.data()) x = rng.uniform(-s, s);
    return t;
}

} // namespace lpn
