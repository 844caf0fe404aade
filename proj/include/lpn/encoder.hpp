// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "lpn/autodiff.hpp"
#include "lpn/dataset.hpp"
#include "lpn/init.hpp"

namespace lpn::encoder {

/// Multi-head self-attentive pooling weights.
///   f1: d' x d, f2: R x d', f3: d x (d*R)
struct EncoderParams {
    Tensor f1;
    Tensor f2;
    Tensor f3;

    std::size_t width() const { return f1.cols(); }
    std::size_t hidden() const { return f1.rows(); }
    std::size_t heads() const { return f2.rows(); }

    static EncoderParams init(std::size_t d, std::size_t hidden, std::size_t heads, Rng& rng) {
        EncoderParams p;
        p.f1 = glorot_uniform(hidden, d, rng);
        p.f2 = glorot_uniform(heads, hidden, rng);
        p.f3 = glorot_uniform(d, d * heads, rng);
        return p;
    }

    void check() const {
        const std::size_t d = width();
        if (f2.cols() != hidden() || f3.rows() != d || f3.cols() != d * heads())
            throw ShapeError("encoder: inconsistent parameter shapes f1 " + shape_string(f1.shape()) + ", f2 " +
                             shape_string(f2.shape()) + ", f3 " + shape_string(f3.shape()));
    }
};

/// Encoder parameters bound into a graph, with the transposes the
/// token-major layout needs computed once per graph.
struct EncoderVars {
    ad::Var f1;
    ad::Var f2;
    ad::Var f3;
    ad::Var f1_t;
    ad::Var f3_t;

    EncoderVars(ad::Var f1_, ad::Var f2_, ad::Var f3_)
        : f1(f1_), f2(f2_), f3(f3_), f1_t(ad::transpose(f1_)), f3_t(ad::transpose(f3_)) {}

    std::size_t width() const { return f1.value().cols(); }
    std::size_t heads() const { return f2.value().rows(); }
};

struct Encoding {
    ad::Var embedding; ///< o, 1 x d
    ad::Var attention; ///< A, R x T
};

/// Sentence embedding from a token-major T x d matrix X (so H = X^T):
///   A = softmax(F2 tanh(F1 H)) over tokens, M = H A^T, o = F3 [m_1 || ... || m_R].
inline Encoding encode(const EncoderVars& p, ad::Var tokens) {
    const Tensor& x = tokens.value();
    if (x.rank() != 2 || x.rows() == 0) throw ShapeError("encode: need at least one token");
    if (x.cols() != p.width())
        throw ShapeError("encode: token width " + std::to_string(x.cols()) + " does not match encoder width " +
                         std::to_string(p.width()));
    ad::Var hidden = ad::tanh(ad::matmul(tokens, p.f1_t));                 // T x d'
    ad::Var scores = ad::matmul(p.f2, ad::transpose(hidden));             // R x T
    ad::Var attention = ad::softmax(scores, 1);                           // R x T
    ad::Var heads = ad::matmul(attention, tokens);                        // R x d, row r = m_r^T
    std::vector<ad::Var> parts;
    parts.reserve(p.heads());
    for (std::size_t r = 0; r < p.heads(); ++r) parts.push_back(ad::row(heads, r));
    ad::Var stacked = parts.size() == 1 ? parts.front() : ad::concat(parts, 1); // 1 x dR
    return {ad::matmul(stacked, p.f3_t), attention};
}

/// Label-description embedding e^i; same weights as sentences.
inline ad::Var encode_label(const EncoderVars& p, const LabelDescription& desc) {
    return encode(p, p.f1.graph()->constant(desc.tokens)).embedding;
}

/// Convenience evaluation outside any training graph.
inline Tensor encode(const EncoderParams& params, const Tensor& tokens, Tensor* attention = nullptr) {
    ad::Graph g;
    EncoderVars vars(g.constant(params.f1), g.constant(params.f2), g.constant(params.f3));
    Encoding e = encode(vars, g.constant(tokens));
    if (attention) *attention = e.attention.value();
    return e.embedding.value();
}

} // namespace lpn::encoder
