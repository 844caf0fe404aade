// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

#include "lpn/gradcheck.hpp"

namespace lpn {

struct AdamWConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// First/second moment estimates, keyed like the parameters.
struct AdamWState {
    ad::ParamMap m;
    ad::ParamMap v;
    std::uint64_t step = 0;

    friend bool operator==(const AdamWState&, const AdamWState&) = default;
};

/// One AdamW update with bias correction and decoupled weight decay
/// (theta -= lr * wd * theta, applied before the adaptive step).
inline void adamw_step(ad::ParamMap& params, const ad::Gradients& grads, AdamWState& state, const AdamWConfig& cfg) {
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, theta] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw Error("adamw: no gradient for parameter " + name);
        const Tensor& g = git->second;
        if (g.shape() != theta.shape()) throw ShapeError("adamw: gradient shape mismatch for " + name);
        auto [mit, m_new] = state.m.try_emplace(name, theta.shape());
        auto [vit, v_new] = state.v.try_emplace(name, theta.shape());
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            theta[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

} // namespace lpn
