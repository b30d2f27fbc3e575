#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cff/ops.hpp"
#include "cff/tensor.hpp"

// Layer-local supervised contrastive loss over a two-view batch, with the
// two positive-pair margin variants (saturating clamp in similarity space,
// gradient-neutral post-log-probability subtraction) and the two numerical
// stability modes (row-max shift detached from or included in the backward
// pass).

namespace cff {

enum class MarginType { clamp, subtract, none };
enum class StabilityMode { detach, direct };

inline const char* to_string(MarginType m) {
    switch (m) {
        case MarginType::clamp: return "clamp";
        case MarginType::subtract: return "subtract";
        case MarginType::none: return "none";
    }
    return "?";
}

inline const char* to_string(StabilityMode s) {
    return s == StabilityMode::detach ? "detach" : "direct";
}

inline MarginType margin_type_from_string(const std::string& s) {
    if (s == "clamp") return MarginType::clamp;
    if (s == "subtract") return MarginType::subtract;
    if (s == "none") return MarginType::none;
    throw std::invalid_argument("unknown margin type: " + s);
}

inline StabilityMode stability_mode_from_string(const std::string& s) {
    if (s == "detach") return StabilityMode::detach;
    if (s == "direct") return StabilityMode::direct;
    throw std::invalid_argument("unknown stability mode: " + s);
}

struct LossConfig {
    double temperature = 0.15;
    double margin = 0.0;
    MarginType margin_type = MarginType::clamp;
    StabilityMode stability = StabilityMode::detach;

    // Logit-space strength of a similarity-space margin before saturation.
    double effective_logit_shift() const { return margin / temperature; }

    void validate() const {
        if (!(temperature > 0.0)) throw std::invalid_argument("LossConfig: temperature must be positive");
        if (margin < 0.0) throw std::invalid_argument("LossConfig: margin must be nonnegative");
    }
};

/// Pairwise cosine similarities for one concatenated view batch, plus the
/// label-derived positive structure. `sim` stays on the tape when built
/// from a recorded representation matrix; `mask` is always a constant.
struct SimilarityContext {
    Tensor sim;    // [2B x 2B]
    Tensor mask;   // [2B x 2B], mask[u][v] = 1 iff y(u) = y(v) and u != v
    std::vector<int> labels;
    std::vector<std::vector<int>> positive_sets;

    int num_views() const { return static_cast<int>(labels.size()); }

    int positive_pair_count() const {
        int c = 0;
        for (const auto& p : positive_sets) c += static_cast<int>(p.size());
        return c;
    }
};

inline Tensor positive_mask(const std::vector<int>& labels) {
    const int n = static_cast<int>(labels.size());
    std::vector<double> m(static_cast<std::size_t>(n) * n, 0.0);
    for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v)
            if (u != v && labels[static_cast<std::size_t>(u)] == labels[static_cast<std::size_t>(v)])
                m[static_cast<std::size_t>(u) * n + v] = 1.0;
    return Tensor({n, n}, std::move(m));
}

inline std::vector<std::vector<int>> positive_sets_from_labels(const std::vector<int>& labels) {
    const int n = static_cast<int>(labels.size());
    std::vector<std::vector<int>> sets(static_cast<std::size_t>(n));
    for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v)
            if (u != v && labels[static_cast<std::size_t>(u)] == labels[static_cast<std::size_t>(v)])
                sets[static_cast<std::size_t>(u)].push_back(v);
    return sets;
}

/// S = Z Z^T for a unit-row representation matrix. Rows whose norm strays
/// from 1 by more than 1e-4 are rejected: cosine similarity is only the dot
/// product on the unit sphere.
inline SimilarityContext similarity_context(const Tensor& z, const std::vector<int>& labels) {
    detail::require_matrix(z, "similarity_context");
    if (static_cast<int>(labels.size()) != z.rows())
        throw std::invalid_argument("similarity_context: one label per row required");
    const int n = z.rows(), d = z.cols();
    const auto& zv = z.values();
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            const double v = zv[static_cast<std::size_t>(i) * d + j];
            s += v * v;
        }
        if (std::abs(std::sqrt(s) - 1.0) > 1e-4)
            throw std::invalid_argument("similarity_context: row " + std::to_string(i) +
                                        " is not unit-norm");
    }
    SimilarityContext ctx;
    ctx.sim = matmul(z, transpose(z));
    ctx.labels = labels;
    ctx.mask = positive_mask(labels);
    ctx.positive_sets = positive_sets_from_labels(labels);
    return ctx;
}

/// Wraps an externally constructed similarity matrix (tests and oracles).
/// The matrix must be symmetric with a unit diagonal, like a true Gram
/// matrix of unit vectors.
inline SimilarityContext similarity_context_from_matrix(const Tensor& sim,
                                                        const std::vector<int>& labels) {
    detail::require_matrix(sim, "similarity_context_from_matrix");
    const int n = sim.rows();
    if (sim.cols() != n) throw std::invalid_argument("similarity_context_from_matrix: matrix must be square");
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("similarity_context_from_matrix: one label per row required");
    for (int u = 0; u < n; ++u) {
        if (std::abs(sim.at(u, u) - 1.0) > 1e-6)
            throw std::invalid_argument("similarity_context_from_matrix: diagonal must be 1");
        for (int v = u + 1; v < n; ++v)
            if (std::abs(sim.at(u, v) - sim.at(v, u)) > 1e-6)
                throw std::invalid_argument("similarity_context_from_matrix: matrix must be symmetric");
    }
    SimilarityContext ctx;
    ctx.sim = sim;
    ctx.labels = labels;
    ctx.mask = positive_mask(labels);
    ctx.positive_sets = positive_sets_from_labels(labels);
    return ctx;
}

/// Clamp margin: positive-pair similarities become min(s + m, 1); all other
/// entries pass through untouched. Built on clamp_upper, so a saturated
/// pair contributes zero gradient along its own (numerator) path. m = 0 is
/// the identity.
inline Tensor apply_clamp_margin(const Tensor& sim, const Tensor& mask, double m) {
    if (m < 0.0) throw std::invalid_argument("apply_clamp_margin: margin must be nonnegative");
    if (m == 0.0) return sim;
    detail::require_same_shape(sim, mask, "apply_clamp_margin");
    const int n = sim.rows();
    std::vector<double> inv(mask.values());
    for (double& v : inv) v = 1.0 - v;
    Tensor inv_mask(mask.shape(), std::move(inv));
    std::vector<double> bump(mask.values());
    for (double& v : bump) v *= m;
    Tensor margin_term(mask.shape(), std::move(bump));
    (void)n;
    Tensor clamped = clamp_upper(add(sim, margin_term), 1.0);
    return add(mul(mask, clamped), mul(inv_mask, sim));
}

namespace detail {

struct LossWeights {
    Tensor pair_weight;   // W[u][v] = mask[u][v] / (|A| * |P_u|)
    int anchor_count = 0;
};

inline LossWeights loss_weights(const SimilarityContext& ctx) {
    const int n = ctx.num_views();
    int anchors = 0;
    for (const auto& p : ctx.positive_sets)
        if (!p.empty()) ++anchors;
    if (anchors == 0)
        throw std::invalid_argument("layer_loss: every anchor has an empty positive set");
    std::vector<double> w(static_cast<std::size_t>(n) * n, 0.0);
    for (int u = 0; u < n; ++u) {
        const auto& pu = ctx.positive_sets[static_cast<std::size_t>(u)];
        if (pu.empty()) continue;
        const double wu = 1.0 / (static_cast<double>(anchors) * static_cast<double>(pu.size()));
        for (int v : pu) w[static_cast<std::size_t>(u) * n + v] = wu;
    }
    LossWeights out;
    out.pair_weight = Tensor({n, n}, std::move(w));
    out.anchor_count = anchors;
    return out;
}

}  // namespace detail

/// Per-pair log-probability matrix log p[u][v] = g[u][v] - lse_u, where g
/// carries the margin-modified, temperature-scaled, stability-shifted
/// logits. Only off-diagonal entries are meaningful.
inline Tensor log_prob_matrix(const SimilarityContext& ctx, const LossConfig& cfg) {
    cfg.validate();
    Tensor stilde = cfg.margin_type == MarginType::clamp
                        ? apply_clamp_margin(ctx.sim, ctx.mask, cfg.margin)
                        : ctx.sim;
    Tensor logits = scale(stilde, 1.0 / cfg.temperature);
    Tensor shift = row_max_excluding_self(logits);
    if (cfg.stability == StabilityMode::detach) shift = stop_gradient(shift);
    Tensor g = sub_colvec(logits, shift);
    Tensor lse = row_logsumexp_excluding_self(g);
    return sub_colvec(g, lse);
}

/// Mean-over-positives supervised contrastive loss. Anchors without any
/// positive are excluded from the outer mean; a batch in which no anchor
/// has a positive is an error.
inline Tensor layer_loss(const SimilarityContext& ctx, const LossConfig& cfg) {
    const auto weights = detail::loss_weights(ctx);
    Tensor logp = log_prob_matrix(ctx, cfg);
    if (cfg.margin_type == MarginType::subtract && cfg.margin != 0.0) {
        std::vector<double> shift(ctx.mask.values());
        for (double& v : shift) v *= cfg.margin;
        logp = sub(logp, Tensor(ctx.mask.shape(), std::move(shift)));
    }
    Tensor loss = negate(sum_all(mul(weights.pair_weight, logp)));
    if (!std::isfinite(loss.value()))
        throw std::runtime_error("layer_loss: non-finite loss value");
    return loss;
}

/// Numeric check of the margin-subtraction identity: against the no-margin
/// loss, subtracting m after the log-probability shifts the forward value
/// by exactly m and leaves gradients untouched. Gradients are compared at
/// the representation matrix.
struct Prop1Report {
    double forward_shift = 0.0;
    double expected_shift = 0.0;
    double max_grad_diff = 0.0;
};

inline Prop1Report proposition1_check(const Tensor& z_values, const std::vector<int>& labels,
                                      double temperature, double margin,
                                      StabilityMode stability = StabilityMode::detach) {
    Tape tape;
    Tensor z = tape.watch(z_values);
    SimilarityContext ctx = similarity_context(z, labels);

    LossConfig sub_cfg{temperature, margin, MarginType::subtract, stability};
    LossConfig none_cfg{temperature, 0.0, MarginType::none, stability};
    Tensor loss_sub = layer_loss(ctx, sub_cfg);
    Tensor loss_none = layer_loss(ctx, none_cfg);

    Prop1Report rep;
    rep.expected_shift = margin;
    rep.forward_shift = loss_sub.value() - loss_none.value();

    tape.backward(loss_sub);
    const std::vector<double> g_sub = tape.grad(z);
    tape.backward(loss_none);
    const std::vector<double> g_none = tape.grad(z);
    for (std::size_t i = 0; i < g_sub.size(); ++i)
        rep.max_grad_diff = std::max(rep.max_grad_diff, std::abs(g_sub[i] - g_none[i]));
    return rep;
}

}  // namespace cff
