// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "lpn/autodiff.hpp"
#include "lpn/init.hpp"

namespace lpn::contrastive {

/// w_a: d x 2d, b_a: 1 x d.
struct ContrastiveParams {
    Tensor w_a;
    Tensor b_a;

    static ContrastiveParams init(std::size_t d, Rng& rng) { return {glorot_uniform(d, 2 * d, rng), Tensor({1, d})}; }
};

/// Per-class attention queries (W_a a^i + b_a)^T with a^i = [p^i || e^i],
/// stacked into N x d.
inline ad::Var class_queries(ad::Var protos, ad::Var label_embs, ad::Var w_a, ad::Var b_a) {
    ad::Var joined = ad::concat({protos, label_embs}, 1); // N x 2d
    return ad::add(ad::matmul(joined, ad::transpose(w_a)), b_a);
}

/// Label-specific embeddings of one sentence for all N classes (N x d):
///   g^i = softmax(q_i^T H) over tokens, z^i = g^i H^T.
/// `tokens` is the T x d token-major matrix and `tokens_t` its transpose.
inline ad::Var label_specific_embeddings(ad::Var queries, ad::Var tokens, ad::Var tokens_t) {
    ad::Var g = ad::softmax(ad::matmul(queries, tokens_t), 1); // N x T
    return ad::matmul(g, tokens);                             // N x d
}

/// Index bookkeeping over the label-specific embeddings of an episode.
///
/// `usable` lists (class i, sentence j) for every z^{ij} with y^{ij} = 1 (the
/// set I), sentence-major. The candidate pool of anchor a is I without a;
/// its positives are the entries of the same class from other sentences.
struct AnchorSet {
    std::vector<std::pair<std::size_t, std::size_t>> usable;
    std::vector<std::vector<std::size_t>> positives;

    std::size_t size() const { return usable.size(); }
    bool flagged(std::size_t a) const { return positives[a].empty(); }
    std::size_t contributing() const {
        std::size_t n = 0;
        for (const auto& p : positives) n += p.empty() ? 0 : 1;
        return n;
    }
    std::size_t candidates(std::size_t) const { return usable.empty() ? 0 : usable.size() - 1; }
};

/// `labels[j][i]` is y^{ij} for sentence j and class i.
inline AnchorSet build_anchor_sets(const std::vector<std::vector<std::uint8_t>>& labels) {
    AnchorSet set;
    for (std::size_t j = 0; j < labels.size(); ++j)
        for (std::size_t i = 0; i < labels[j].size(); ++i)
            if (labels[j][i]) set.usable.emplace_back(i, j);
    set.positives.resize(set.usable.size());
    for (std::size_t a = 0; a < set.usable.size(); ++a)
        for (std::size_t b = 0; b < set.usable.size(); ++b)
            if (a != b && set.usable[a].first == set.usable[b].first) set.positives[a].push_back(b);
    return set;
}

struct ContrastiveLoss {
    ad::Var loss;          ///< 1 x 1
    ad::Var per_anchor;    ///< |I| x 1, zero for flagged anchors
    std::size_t contributing = 0;
    bool signal = false;   ///< false when no anchor has a positive
};

/// Rows scaled to unit length, composed from primitive ops.
inline ad::Var l2_normalize_rows(ad::Var z) {
    ad::Var inv_norm = ad::exp(ad::scale(ad::log(ad::sum(ad::mul(z, z), 1)), -0.5));
    return ad::mul(z, inv_norm);
}

/// Supervised contrastive loss over the usable embeddings `z` (|I| x d, rows
/// in AnchorSet order). Per anchor:
///   L^a = -(1/|P(a)|) sum_{p in P(a)} [ z_a.z_p/tau - log sum_{c != a} exp(z_a.z_c/tau) ]
/// averaged over anchors whose positive set is nonempty.
inline ContrastiveLoss loss_scl(ad::Var z, const AnchorSet& anchors, double tau, bool normalize = false) {
    if (!(tau > 0.0)) throw ConfigError("contrastive temperature must be positive");
    if (z.rows() != anchors.size()) throw ShapeError("loss_scl: embedding rows do not match anchor set");
    ad::Graph& g = *z.graph();
    const std::size_t n = anchors.size();
    ContrastiveLoss out;
    out.contributing = anchors.contributing();
    out.signal = out.contributing > 0;
    if (!out.signal) {
        out.loss = g.constant(Tensor({1, 1}));
        out.per_anchor = g.constant(Tensor({n == 0 ? 1 : n, 1}));
        return out;
    }
    if (normalize) z = l2_normalize_rows(z);

    // The anchor itself is removed from its candidate pool by a large
    // negative offset; exp() of it underflows to exactly zero.
    Tensor self_mask({n, n});
    Tensor positive({n, n});
    Tensor inv_count({n, 1});
    for (std::size_t a = 0; a < n; ++a) {
        self_mask(a, a) = -1e300;
        for (auto p : anchors.positives[a]) positive(a, p) = 1.0;
        if (!anchors.positives[a].empty()) inv_count(a, 0) = 1.0 / static_cast<double>(anchors.positives[a].size());
    }
    ad::Var sim = ad::scale(ad::matmul(z, ad::transpose(z)), 1.0 / tau);
    ad::Var log_probs = ad::log_softmax_rows(ad::add(sim, g.constant(std::move(self_mask))));
    ad::Var pos = ad::sum(ad::mul(log_probs, g.constant(std::move(positive))), 1);
    out.per_anchor = ad::neg(ad::mul(pos, g.constant(std::move(inv_count))));
    out.loss = ad::scale(ad::sum(out.per_anchor), 1.0 / static_cast<double>(out.contributing));
    return out;
}

} // namespace lpn::contrastive
