// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lpn/config.hpp"
#include "lpn/contrastive.hpp"
#include "lpn/dataset.hpp"
#include "lpn/encoder.hpp"
#include "lpn/episode.hpp"
#include "lpn/gradcheck.hpp"
#include "lpn/inference.hpp"
#include "lpn/prototypes.hpp"

namespace lpn {

/// All trainable tensors of the model.
struct ModelParams {
    encoder::EncoderParams encoder;
    proto::BilinearParams bilinear;
    contrastive::ContrastiveParams contrastive;
    inference::CountParams count;
    Variant variant = Variant::WW;

    std::size_t d() const { return encoder.width(); }
    std::size_t n_way() const { return count.n_way(); }

    /// Flat view keyed "<group>.<name>".
    ad::ParamMap to_map() const {
        return {
            {"encoder.F1", encoder.f1},       {"encoder.F2", encoder.f2},         {"encoder.F3", encoder.f3},
            {"bilinear.U", bilinear.u},       {"bilinear.V", bilinear.v},         {"contrastive.W_a", contrastive.w_a},
            {"contrastive.b_a", contrastive.b_a}, {"count.W_l", count.w_l},       {"count.b_l", count.b_l},
        };
    }

    static ModelParams from_map(const ad::ParamMap& m, Variant variant) {
        auto get = [&](const char* name) -> const Tensor& {
            auto it = m.find(name);
            if (it == m.end()) throw FormatError(std::string("missing parameter tensor ") + name);
            return it->second;
        };
        ModelParams p;
        p.encoder = {get("encoder.F1"), get("encoder.F2"), get("encoder.F3")};
        p.bilinear = {get("bilinear.U"), get("bilinear.V")};
        p.contrastive = {get("contrastive.W_a"), get("contrastive.b_a")};
        p.count = {get("count.W_l"), get("count.b_l")};
        p.variant = variant;
        p.check();
        return p;
    }

    void check() const {
        encoder.check();
        const std::size_t dd = d();
        const auto shape_is = [](const Tensor& t, std::size_t r, std::size_t c) {
            return t.rank() == 2 && t.rows() == r && t.cols() == c;
        };
        const std::size_t k = bilinear.u.rank() == 2 ? bilinear.u.cols() : 0;
        if (!shape_is(bilinear.u, dd, k) || !shape_is(bilinear.v, dd, k) || k == 0 || k >= dd)
            throw ShapeError("bilinear factors must both be d x k with 1 <= k < d");
        if (!shape_is(contrastive.w_a, dd, 2 * dd) || !shape_is(contrastive.b_a, 1, dd))
            throw ShapeError("contrastive parameters must be d x 2d and 1 x d");
        const std::size_t n = count.w_l.rank() == 2 ? count.w_l.rows() : 0;
        if (n == 0 || !shape_is(count.w_l, n, dd) || !shape_is(count.b_l, 1, n))
            throw ShapeError("count head must be N x d and 1 x N");
    }

    friend bool operator==(const ModelParams& a, const ModelParams& b) {
        return a.variant == b.variant && a.to_map() == b.to_map();
    }
};

/// Deterministic initialization from (config, seed). Biases start at zero,
/// matrices at Glorot-uniform.
inline ModelParams init_params(const RunConfig& config, std::uint64_t seed) {
    if (config.k_rank >= config.d)
        throw ConfigError("model.k_rank must be smaller than model.d (k=" + std::to_string(config.k_rank) +
                          ", d=" + std::to_string(config.d) + ")");
    Rng rng(mix_seed(seed ^ 0x1A17ULL));
    ModelParams p;
    p.encoder = encoder::EncoderParams::init(config.d, config.d_hidden, config.r_heads, rng);
    p.bilinear = proto::BilinearParams::init(config.d, config.k_rank, rng);
    p.contrastive = contrastive::ContrastiveParams::init(config.d, rng);
    p.count = inference::CountParams::init(config.n_way, config.d, rng);
    p.variant = config.variant;
    return p;
}

/// Parameters bound as graph leaves.
struct ModelVars {
    encoder::EncoderVars enc;
    ad::Var u, v, w_a, b_a, w_l, b_l;

    explicit ModelVars(const ad::BoundParams& b)
        : enc(b.at("encoder.F1"), b.at("encoder.F2"), b.at("encoder.F3")), u(b.at("bilinear.U")),
          v(b.at("bilinear.V")), w_a(b.at("contrastive.W_a")), b_a(b.at("contrastive.b_a")), w_l(b.at("count.W_l")),
          b_l(b.at("count.b_l")) {}
};

struct LossSettings {
    Variant variant = Variant::WW;
    double tau = 0.1;
    double gamma = 0.01;
    double lambda = 0.1;
    bool normalize_contrastive = false;

    static LossSettings from(const RunConfig& c) {
        return {c.variant, c.tau, c.gamma, c.lambda, c.normalize_contrastive};
    }
};

/// Graph nodes of one episode's forward pass.
struct EpisodeForward {
    std::vector<std::size_t> sentences;   ///< distinct episode sentences (supports, then queries)
    ad::Var embeddings;                   ///< one row per entry of `sentences`
    ad::Var prototypes;                   ///< N x d
    std::optional<ad::Var> shot_weights;  ///< N x K, label-enhanced variants only
    ad::Var query_logits;                 ///< |Q| x N
    ad::Var query_probs;                  ///< |Q| x N
    ad::Var query_count_probs;            ///< |Q| x N
    // Populated when losses are requested.
    std::optional<ad::Var> lepn, scl, count, total;
    std::optional<contrastive::ContrastiveLoss> contrastive;
    contrastive::AnchorSet anchors;
    FloorEvents floor;
};

/// Runs the full model on one episode.
///
/// Every distinct sentence is encoded once. Prototypes are label-enhanced for
/// variants wo/ww and plain means for oo. The count loss covers all distinct
/// support and query sentences; the contrastive loss (ww only) uses the
/// label-specific embeddings of the same sentences.
inline EpisodeForward forward_episode(ad::Graph& g, const ModelVars& m, const Dataset& ds, const Episode& ep,
                                      const LossSettings& settings, bool with_losses = true) {
    const std::size_t n = ep.n_way();
    if (n == 0 || ep.support.size() != n) throw Error("forward: malformed episode");
    if (m.w_l.rows() != n)
        throw ConfigError("episode has " + std::to_string(n) + " classes but the count head was built for " +
                          std::to_string(m.w_l.rows()));
    if (ep.query.empty()) throw Error("forward: episode has no queries");

    EpisodeForward out;
    out.sentences = episode_sentences(ep);
    std::map<std::size_t, std::size_t> row_of;
    std::vector<ad::Var> token_vars;
    std::vector<ad::Var> emb_rows;
    for (std::size_t r = 0; r < out.sentences.size(); ++r) {
        const Sentence& s = ds.sentences.at(out.sentences[r]);
        row_of[out.sentences[r]] = r;
        token_vars.push_back(g.constant(s.tokens));
        emb_rows.push_back(encoder::encode(m.enc, token_vars.back()).embedding);
    }
    out.embeddings = ad::concat(emb_rows, 0);

    std::vector<ad::Var> supports;
    for (const auto& shots : ep.support) {
        std::vector<ad::Var> rows;
        for (auto s : shots) rows.push_back(emb_rows[row_of.at(s)]);
        supports.push_back(rows.size() == 1 ? rows.front() : ad::concat(rows, 0));
    }

    std::vector<ad::Var> label_rows;
    std::optional<ad::Var> label_embs;
    if (settings.variant != Variant::OO) {
        for (auto c : ep.class_ids) label_rows.push_back(encoder::encode_label(m.enc, ds.label(c)));
        label_embs = n == 1 ? label_rows.front() : ad::concat(label_rows, 0);
        ad::Var alpha = proto::attention_logits(supports, label_rows, m.u, m.v);
        out.shot_weights = proto::shot_weights(alpha);
        out.prototypes = proto::prototypes(supports, *out.shot_weights);
    } else {
        out.prototypes = proto::mean_prototypes(supports);
    }

    // Queries are the trailing rows of the sentence list.
    const std::size_t total_rows = out.sentences.size();
    const std::size_t q_begin = total_rows - ep.query.size();
    ad::Var queries = ad::slice(out.embeddings, 0, q_begin, total_rows);
    out.query_logits = proto::class_logits(queries, out.prototypes);
    out.query_probs = ad::softmax(out.query_logits, 1);
    ad::Var count_logits = inference::count_logits(out.embeddings, m.w_l, m.b_l);
    out.query_count_probs = ad::softmax(ad::slice(count_logits, 0, q_begin, total_rows), 1);

    if (!with_losses) return out;

    out.lepn = proto::loss_lepn(out.query_logits, episode_label_matrix(ep), out.floor);

    std::vector<std::vector<std::uint8_t>> labels;
    std::vector<std::size_t> targets;
    for (auto s : out.sentences) {
        labels.push_back(episode_labels(ds.sentences[s], ep.class_ids));
        std::size_t c = 0;
        for (auto y : labels.back()) c += y;
        targets.push_back(inference::count_target(c, n));
    }
    out.count = inference::loss_count(count_logits, targets, out.floor);

    if (settings.variant == Variant::WW) {
        ad::Var class_q = contrastive::class_queries(out.prototypes, *label_embs, m.w_a, m.b_a);
        out.anchors = contrastive::build_anchor_sets(labels);
        std::vector<ad::Var> usable;
        std::map<std::size_t, ad::Var> per_sentence;
        for (const auto& [cls, sent] : out.anchors.usable) {
            auto it = per_sentence.find(sent);
            if (it == per_sentence.end()) {
                ad::Var tokens = token_vars[sent];
                ad::Var z = contrastive::label_specific_embeddings(class_q, tokens, ad::transpose(tokens));
                it = per_sentence.emplace(sent, z).first;
            }
            usable.push_back(ad::row(it->second, cls));
        }
        ad::Var z = usable.size() == 1 ? usable.front() : ad::concat(usable, 0);
        out.contrastive = contrastive::loss_scl(z, out.anchors, settings.tau, settings.normalize_contrastive);
        out.scl = out.contrastive->loss;
        out.total = inference::total_loss(*out.lepn, *out.scl, *out.count, settings.gamma, settings.lambda);
    } else {
        out.scl = g.constant(Tensor({1, 1}));
        out.total = ad::add(*out.lepn, ad::scale(*out.count, settings.lambda));
    }
    return out;
}

/// Loss values of a forward pass.
inline inference::LossBreakdown breakdown(const EpisodeForward& f, const LossSettings& s) {
    const double gamma = s.variant == Variant::WW ? s.gamma : 0.0;
    inference::LossBreakdown b{f.lepn->value().item(), f.scl->value().item(), f.count->value().item(),
                               f.total->value().item(), gamma, s.lambda};
    return b;
}

/// Scalar total loss of one episode as a LossBuilder, for gradient checking.
inline ad::LossBuilder episode_loss_builder(const Dataset& ds, const Episode& ep, const LossSettings& settings) {
    return [&ds, ep, settings](ad::Graph& g, const ad::BoundParams& params) {
        ModelVars m(params);
        return *forward_episode(g, m, ds, ep, settings, true).total;
    };
}

} // namespace lpn
