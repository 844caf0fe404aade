// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "lpn/autodiff.hpp"
#include "lpn/init.hpp"
#include "lpn/numerics.hpp"

namespace lpn::inference {

/// Aspect-count head: w_l is N x d, b_l is 1 x N.
struct CountParams {
    Tensor w_l;
    Tensor b_l;

    std::size_t n_way() const { return w_l.rows(); }

    static CountParams init(std::size_t n_way, std::size_t d, Rng& rng) {
        return {glorot_uniform(n_way, d, rng), Tensor({1, n_way})};
    }
};

/// Count logits W_l o + b_l for each embedding row (M x N).
inline ad::Var count_logits(ad::Var embeddings, ad::Var w_l, ad::Var b_l) {
    return ad::add(ad::matmul(embeddings, ad::transpose(w_l)), b_l);
}

/// n_l = softmax(W_l o + b_l); column c-1 stands for "c aspects".
inline ad::Var count_distribution(ad::Var embeddings, ad::Var w_l, ad::Var b_l) {
    return ad::softmax(count_logits(embeddings, w_l, b_l), 1);
}

/// One-hot count target: position (count - 1), clamped into [0, N-1].
inline std::size_t count_target(std::size_t true_count, std::size_t n_way) {
    if (true_count == 0) return 0;
    return std::min(true_count, n_way) - 1;
}

/// Mean over rows of -log n_l[target], probabilities floored at kProbFloor.
inline ad::Var loss_count(ad::Var logits, const std::vector<std::size_t>& targets, FloorEvents& floor) {
    const std::size_t rows = logits.rows(), n = logits.cols();
    if (targets.size() != rows) throw ShapeError("loss_count: one target per row required");
    Tensor onehot({rows, n});
    for (std::size_t r = 0; r < rows; ++r) onehot(r, std::min(targets[r], n - 1)) = 1.0;
    ad::Graph& g = *logits.graph();
    ad::Var log_probs = floor_log_probs(ad::log_softmax_rows(logits), onehot, floor);
    return ad::scale(ad::sum(ad::mul(log_probs, g.constant(std::move(onehot)))), -1.0 / static_cast<double>(rows));
}

/// -1^T (t_l o log n_l) for one explicit distribution.
inline double loss_count(const Tensor& n_l, std::size_t target, FloorEvents* floor = nullptr) {
    double p = n_l[target];
    if (p < kProbFloor) {
        p = kProbFloor;
        if (floor) ++floor->count;
    }
    return -std::log(p);
}

struct LossBreakdown {
    double lepn = 0.0;
    double scl = 0.0;
    double count = 0.0;
    double total = 0.0;
    double gamma = 0.0;
    double lambda = 0.0;
};

inline LossBreakdown total_loss(double lepn, double scl, double count, double gamma, double lambda) {
    if (gamma < 0 || lambda < 0) throw ConfigError("loss weights must be nonnegative");
    return {lepn, scl, count, lepn + gamma * scl + lambda * count, gamma, lambda};
}

inline ad::Var total_loss(ad::Var lepn, ad::Var scl, ad::Var count, double gamma, double lambda) {
    return ad::add(ad::add(lepn, ad::scale(scl, gamma)), ad::scale(count, lambda));
}

/// Predicted aspect count: argmax(n_l) + 1, first maximum wins.
inline std::size_t predicted_count(std::span<const double> n_l) {
    return static_cast<std::size_t>(std::max_element(n_l.begin(), n_l.end()) - n_l.begin()) + 1;
}

/// The c most probable classes, c = argmax(n_l) + 1. Ties go to the lower
/// class index. Returned in ascending index order.
inline std::vector<std::size_t> predict_labels(std::span<const double> probs, std::span<const double> n_l) {
    const std::size_t c = std::min(predicted_count(n_l), probs.size());
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    order.resize(c);
    std::sort(order.begin(), order.end());
    return order;
}

} // namespace lpn::inference
