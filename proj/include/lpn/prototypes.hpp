// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "lpn/autodiff.hpp"
#include "lpn/init.hpp"
#include "lpn/numerics.hpp"

namespace lpn::proto {

/// Low-rank factors of the bilinear shot/label affinity W = U V^T (both d x k, k < d).
struct BilinearParams {
    Tensor u;
    Tensor v;

    static BilinearParams init(std::size_t d, std::size_t rank, Rng& rng) {
        if (rank == 0 || rank >= d)
            throw ConfigError("bilinear rank k must satisfy 1 <= k < d (k=" + std::to_string(rank) +
                              ", d=" + std::to_string(d) + ")");
        return {glorot_uniform(d, rank, rng), glorot_uniform(d, rank, rng)};
    }
};

/// Importance logits alpha (N x K). `supports[i]` is the K x d matrix of class
/// i's shot embeddings and `labels[i]` the 1 x d description embedding:
///   alpha_j^i = 1^T (U^T o_j^i  o  V^T e^i)
inline ad::Var attention_logits(std::span<const ad::Var> supports, std::span<const ad::Var> labels, ad::Var u,
                                ad::Var v) {
    if (supports.size() != labels.size() || supports.empty())
        throw ShapeError("attention_logits: need one label embedding per class");
    std::vector<ad::Var> rows;
    rows.reserve(supports.size());
    for (std::size_t i = 0; i < supports.size(); ++i) {
        ad::Var shots = ad::matmul(supports[i], u);     // K x k
        ad::Var label = ad::matmul(labels[i], v);       // 1 x k
        ad::Var alpha = ad::sum(ad::mul(shots, label), 1); // K x 1
        rows.push_back(ad::transpose(alpha));
    }
    return rows.size() == 1 ? rows.front() : ad::concat(rows, 0);
}

/// beta: softmax of alpha across the K shots of each class.
inline ad::Var shot_weights(ad::Var alpha) { return ad::softmax(alpha, 1); }

/// p^i = sum_j beta_j^i o_j^i, stacked into N x d.
inline ad::Var prototypes(std::span<const ad::Var> supports, ad::Var beta) {
    if (beta.rows() != supports.size()) throw ShapeError("prototypes: beta rows must equal class count");
    std::vector<ad::Var> rows;
    rows.reserve(supports.size());
    for (std::size_t i = 0; i < supports.size(); ++i) {
        if (supports[i].rows() != beta.cols()) throw ShapeError("prototypes: shot count mismatch");
        rows.push_back(ad::matmul(ad::row(beta, i), supports[i]));
    }
    return rows.size() == 1 ? rows.front() : ad::concat(rows, 0);
}

/// Vanilla prototypes: the uniform-weight special case of `prototypes`.
inline ad::Var mean_prototypes(std::span<const ad::Var> supports) {
    if (supports.empty()) throw ShapeError("mean_prototypes: no classes");
    const std::size_t k = supports.front().rows();
    ad::Graph& g = *supports.front().graph();
    ad::Var beta = g.constant(Tensor({supports.size(), k}, 1.0 / static_cast<double>(k)));
    return prototypes(supports, beta);
}

/// Logits -||o - p^i||^2 for each query row against each prototype (|Q| x N).
inline ad::Var class_logits(ad::Var queries, ad::Var protos) { return ad::neg(ad::sqdist(queries, protos)); }

/// p(y = i | x, S): softmax over negative squared distances.
inline ad::Var classify(ad::Var queries, ad::Var protos) { return ad::softmax(class_logits(queries, protos), 1); }

/// Multi-label prototypical loss from class logits:
///   (1/|Q|) sum_q sum_i -y_q^i log p(y = i | x_q)
/// Every positive label of a query contributes its own -log term against
/// the same softmax. Probabilities are floored at kProbFloor.
inline ad::Var loss_lepn(ad::Var logits, const Tensor& labels, FloorEvents& floor) {
    if (logits.value().shape() != labels.shape()) throw ShapeError("loss_lepn: label matrix shape mismatch");
    ad::Graph& g = *logits.graph();
    ad::Var log_probs = floor_log_probs(ad::log_softmax_rows(logits), labels, floor);
    ad::Var picked = ad::mul(log_probs, g.constant(labels));
    return ad::scale(ad::sum(picked), -1.0 / static_cast<double>(labels.rows()));
}

/// The same loss evaluated on an explicit probability matrix.
inline double loss_lepn(const Tensor& probs, const Tensor& labels, FloorEvents* floor = nullptr) {
    if (probs.shape() != labels.shape()) throw ShapeError("loss_lepn: label matrix shape mismatch");
    double total = 0.0;
    for (std::size_t q = 0; q < probs.rows(); ++q)
        for (std::size_t i = 0; i < probs.cols(); ++i) {
            if (labels(q, i) == 0.0) continue;
            double p = probs(q, i);
            if (p < kProbFloor) {
                p = kProbFloor;
                if (floor) ++floor->count;
            }
            total -= labels(q, i) * std::log(p);
        }
    return total / static_cast<double>(probs.rows());
}

} // namespace lpn::proto
