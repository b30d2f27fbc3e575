#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cff/tensor.hpp"

// Reverse-mode operator set. Every operator computes its forward value
// eagerly, validates shapes, rejects non-finite outputs, and (when any
// operand is recorded) appends one node whose closure scatters the output
// gradient back into its parents. Saved values are captured through the
// tensors' shared buffers; a tape's backward sweeps must therefore run
// before parameter buffers are mutated by an optimizer step.

namespace cff {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

inline void require_matrix(const Tensor& t, const char* op) {
    if (t.ndim() != 2)
        throw std::invalid_argument(std::string(op) + ": expected a 2-d tensor");
}

inline Tensor make_result(Shape shape, std::vector<double> values, Tape* tape,
                          Tape::BackwardFn back, const char* op) {
    check_finite(values, op);
    Tensor out(std::move(shape), std::move(values));
    if (tape != nullptr) {
        out.tape = tape;
        out.node = tape->add_node(out.size(), std::move(back));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// stop-gradient and elementwise arithmetic

/// Identity on the forward pass, zero on the backward pass. The result is a
/// fresh constant tensor, so detached subgraphs are never visited by a
/// reverse sweep at all.
inline Tensor stop_gradient(const Tensor& x) { return x.detached_copy(); }

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tape* tape = detail::common_tape({&a, &b});
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const int na = a.node, nb = b.node;
    return detail::make_result(a.shape(), std::move(out), tape,
        [na, nb](const std::vector<double>& g, Tape& t) {
            if (na >= 0) detail::accumulate(t, na, g);
            if (nb >= 0) detail::accumulate(t, nb, g);
        }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tape* tape = detail::common_tape({&a, &b});
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    const int na = a.node, nb = b.node;
    return detail::make_result(a.shape(), std::move(out), tape,
        [na, nb](const std::vector<double>& g, Tape& t) {
            if (na >= 0) detail::accumulate(t, na, g);
            if (nb >= 0) {
                auto& gb = t.grad_buffer(nb);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tape* tape = detail::common_tape({&a, &b});
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const int na = a.node, nb = b.node;
    const auto av = a.data();
    const auto bd = b.data();
    return detail::make_result(a.shape(), std::move(out), tape,
        [na, nb, av, bd](const std::vector<double>& g, Tape& t) {
            if (na >= 0) {
                auto& ga = t.grad_buffer(na);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bd)[i];
            }
            if (nb >= 0) {
                auto& gb = t.grad_buffer(nb);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*av)[i];
            }
        }, "mul");
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    Tape* tape = detail::common_tape({&a, &b});
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
    const int na = a.node, nb = b.node;
    const auto bd = b.data();
    const auto ov = std::make_shared<std::vector<double>>(out);
    return detail::make_result(a.shape(), std::move(out), tape,
        [na, nb, bd, ov](const std::vector<double>& g, Tape& t) {
            if (na >= 0) {
                auto& ga = t.grad_buffer(na);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (*bd)[i];
            }
            if (nb >= 0) {
                auto& gb = t.grad_buffer(nb);
                for (std::size_t i = 0; i < g.size(); ++i)
                    gb[i] -= g[i] * (*ov)[i] / (*bd)[i];
            }
        }, "div");
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.values());
    for (double& v : out) v *= c;
    const int nx = x.node;
    return detail::make_result(x.shape(), std::move(out), x.tape,
        [nx, c](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        }, "scale");
}

inline Tensor add_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.values());
    for (double& v : out) v += c;
    const int nx = x.node;
    return detail::make_result(x.shape(), std::move(out), x.tape,
        [nx](const std::vector<double>& g, Tape& t) {
            if (nx >= 0) detail::accumulate(t, nx, g);
        }, "add_scalar");
}

inline Tensor negate(const Tensor& x) { return scale(x, -1.0); }

// ---------------------------------------------------------------------------
// elementwise transcendental

inline Tensor exp(const Tensor& x) {
    std::vector<double> out(x.values());
    for (double& v : out) {
        if (v > 709.0) throw std::runtime_error("exp: argument exceeds safe range");
        v = std::exp(v);
    }
    const int nx = x.node;
    const auto ov = std::make_shared<std::vector<double>>(out);
    return detail::make_result(x.shape(), std::move(out), x.tape,
        [nx, ov](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*ov)[i];
        }, "exp");
}

inline Tensor log(const Tensor& x) {
    std::vector<double> out(x.values());
    for (double& v : out) {
        if (v <= 0.0) throw std::runtime_error("log: argument must be positive");
        v = std::log(v);
    }
    const int nx = x.node;
    const auto xv = x.data();
    return detail::make_result(x.shape(), std::move(out), x.tape,
        [nx, xv](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (*xv)[i];
        }, "log");
}

inline Tensor sqrt(const Tensor& x) {
    std::vector<double> out(x.values());
    for (double& v : out) {
        if (v < 0.0) throw std::runtime_error("sqrt: argument must be nonnegative");
        v = std::sqrt(v);
    }
    const int nx = x.node;
    const auto ov = std::make_shared<std::vector<double>>(out);
    return detail::make_result(x.shape(), std::move(out), x.tape,
        [nx, ov](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 0.5 / (*ov)[i];
        }, "sqrt");
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<double> out(x.values());
    for (double& v : out) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    const int nx = x.node;
    const auto xv = x.data();
    return detail::make_result(x.shape(), std::move(out), x.tape,
        [nx, xv](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = (*xv)[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        }, "gelu");
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tape* tape = detail::common_tape({&a, &b});
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double aip = av[static_cast<std::size_t>(i) * k + p];
            if (aip == 0.0) continue;
            const std::size_t bo = static_cast<std::size_t>(p) * n;
            const std::size_t oo = static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) out[oo + j] += aip * bv[bo + j];
        }
    const int na = a.node, nb = b.node;
    const auto ad = a.data();
    const auto bd = b.data();
    return detail::make_result({m, n}, std::move(out), tape,
        [na, nb, ad, bd, m, k, n](const std::vector<double>& g, Tape& t) {
            if (na >= 0) {
                auto& ga = t.grad_buffer(na);  // dA = g @ B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (int j = 0; j < n; ++j)
                            s += g[static_cast<std::size_t>(i) * n + j] *
                                 (*bd)[static_cast<std::size_t>(p) * n + j];
                        ga[static_cast<std::size_t>(i) * k + p] += s;
                    }
            }
            if (nb >= 0) {
                auto& gb = t.grad_buffer(nb);  // dB = A^T @ g
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < m; ++i)
                            s += (*ad)[static_cast<std::size_t>(i) * k + p] *
                                 g[static_cast<std::size_t>(i) * n + j];
                        gb[static_cast<std::size_t>(p) * n + j] += s;
                    }
            }
        }, "matmul");
}

inline Tensor transpose(const Tensor& x) {
    detail::require_matrix(x, "transpose");
    const int m = x.rows(), n = x.cols();
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    const auto& xv = x.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(j) * m + i] = xv[static_cast<std::size_t>(i) * n + j];
    const int nx = x.node;
    return detail::make_result({n, m}, std::move(out), x.tape,
        [nx, m, n](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gx[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
        }, "transpose");
}

/// Adds a length-n vector to every row of an m x n matrix (bias add).
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    detail::require_matrix(x, "add_rowvec");
    if (v.ndim() != 1 || v.dim(0) != x.cols())
        throw std::invalid_argument("add_rowvec: vector length must equal column count");
    Tape* tape = detail::common_tape({&x, &v});
    const int m = x.rows(), n = x.cols();
    std::vector<double> out(x.values());
    const auto& vv = v.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] += vv[static_cast<std::size_t>(j)];
    const int nx = x.node, nv = v.node;
    return detail::make_result(x.shape(), std::move(out), tape,
        [nx, nv, m, n](const std::vector<double>& g, Tape& t) {
            if (nx >= 0) detail::accumulate(t, nx, g);
            if (nv >= 0) {
                auto& gv = t.grad_buffer(nv);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gv[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
            }
        }, "add_rowvec");
}

/// out[i][j] = x[i][j] - v[i]; broadcasts a per-row value across columns.
inline Tensor sub_colvec(const Tensor& x, const Tensor& v) {
    detail::require_matrix(x, "sub_colvec");
    if (v.ndim() != 1 || v.dim(0) != x.rows())
        throw std::invalid_argument("sub_colvec: vector length must equal row count");
    Tape* tape = detail::common_tape({&x, &v});
    const int m = x.rows(), n = x.cols();
    std::vector<double> out(x.values());
    const auto& vv = v.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] -= vv[static_cast<std::size_t>(i)];
    const int nx = x.node, nv = v.node;
    return detail::make_result(x.shape(), std::move(out), tape,
        [nx, nv, m, n](const std::vector<double>& g, Tape& t) {
            if (nx >= 0) detail::accumulate(t, nx, g);
            if (nv >= 0) {
                auto& gv = t.grad_buffer(nv);
                for (int i = 0; i < m; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < n; ++j) s += g[static_cast<std::size_t>(i) * n + j];
                    gv[static_cast<std::size_t>(i)] -= s;
                }
            }
        }, "sub_colvec");
}

/// Adds a [t x d] matrix to each consecutive row block of a [(g*t) x d]
/// matrix (positional embeddings tiled over a batch).
inline Tensor add_tile_rows(const Tensor& x, const Tensor& tile) {
    detail::require_matrix(x, "add_tile_rows");
    detail::require_matrix(tile, "add_tile_rows");
    if (x.cols() != tile.cols() || x.rows() % tile.rows() != 0)
        throw std::invalid_argument("add_tile_rows: tile shape does not divide input");
    Tape* tape = detail::common_tape({&x, &tile});
    const int tr = tile.rows(), n = x.cols(), groups = x.rows() / tr;
    std::vector<double> out(x.values());
    const auto& tv = tile.values();
    for (int gidx = 0; gidx < groups; ++gidx)
        for (int r = 0; r < tr; ++r)
            for (int j = 0; j < n; ++j)
                out[(static_cast<std::size_t>(gidx) * tr + r) * n + j] += tv[static_cast<std::size_t>(r) * n + j];
    const int nx = x.node, nt = tile.node;
    return detail::make_result(x.shape(), std::move(out), tape,
        [nx, nt, tr, n, groups](const std::vector<double>& g, Tape& t) {
            if (nx >= 0) detail::accumulate(t, nx, g);
            if (nt >= 0) {
                auto& gt = t.grad_buffer(nt);
                for (int gidx = 0; gidx < groups; ++gidx)
                    for (int r = 0; r < tr; ++r)
                        for (int j = 0; j < n; ++j)
                            gt[static_cast<std::size_t>(r) * n + j] +=
                                g[(static_cast<std::size_t>(gidx) * tr + r) * n + j];
            }
        }, "add_tile_rows");
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    const int nx = x.node;
    const int n = x.size();
    return detail::make_result({1}, {s}, x.tape,
        [nx, n](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (int i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g[0];
        }, "sum_all");
}

inline Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / x.size()); }

/// Mean over the token axis: [(g*t) x d] -> [g x d] where each group of t
/// consecutive rows is one sample's token set.
inline Tensor mean_over_tokens(const Tensor& x, int tokens_per_group) {
    detail::require_matrix(x, "mean_over_tokens");
    if (tokens_per_group < 1 || x.rows() % tokens_per_group != 0)
        throw std::invalid_argument("mean_over_tokens: token count does not divide rows");
    const int t_ = tokens_per_group, n = x.cols(), groups = x.rows() / t_;
    std::vector<double> out(static_cast<std::size_t>(groups) * n, 0.0);
    const auto& xv = x.values();
    for (int gidx = 0; gidx < groups; ++gidx)
        for (int r = 0; r < t_; ++r)
            for (int j = 0; j < n; ++j)
                out[static_cast<std::size_t>(gidx) * n + j] +=
                    xv[(static_cast<std::size_t>(gidx) * t_ + r) * n + j];
    const double inv = 1.0 / t_;
    for (double& v : out) v *= inv;
    const int nx = x.node;
    return detail::make_result({groups, n}, std::move(out), x.tape,
        [nx, t_, n, groups, inv](const std::vector<double>& g, Tape& tp) {
            if (nx < 0) return;
            auto& gx = tp.grad_buffer(nx);
            for (int gidx = 0; gidx < groups; ++gidx)
                for (int r = 0; r < t_; ++r)
                    for (int j = 0; j < n; ++j)
                        gx[(static_cast<std::size_t>(gidx) * t_ + r) * n + j] +=
                            g[static_cast<std::size_t>(gidx) * n + j] * inv;
        }, "mean_over_tokens");
}

namespace detail {

inline Tensor row_max_impl(const Tensor& x, bool exclude_diagonal, const char* op) {
    require_matrix(x, op);
    const int m = x.rows(), n = x.cols();
    if (exclude_diagonal && m != n)
        throw std::invalid_argument(std::string(op) + ": matrix must be square");
    if (!exclude_diagonal && n < 1)
        throw std::invalid_argument(std::string(op) + ": empty rows");
    std::vector<double> out(static_cast<std::size_t>(m));
    auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(m));
    const auto& xv = x.values();
    for (int i = 0; i < m; ++i) {
        int best = -1;
        double bv = 0.0;
        for (int j = 0; j < n; ++j) {
            if (exclude_diagonal && j == i) continue;
            const double v = xv[static_cast<std::size_t>(i) * n + j];
            if (best < 0 || v > bv) {  // ties keep the lowest index
                best = j;
                bv = v;
            }
        }
        out[static_cast<std::size_t>(i)] = bv;
        (*argmax)[static_cast<std::size_t>(i)] = best;
    }
    const int nx = x.node;
    return make_result({m}, std::move(out), x.tape,
        [nx, argmax, n](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i * static_cast<std::size_t>(n) + static_cast<std::size_t>((*argmax)[i])] += g[i];
        }, op);
}

}  // namespace detail

/// Row-wise max; gradient routes to the argmax entry, ties to lowest index.
inline Tensor row_max(const Tensor& x) { return detail::row_max_impl(x, false, "row_max"); }

/// Row-wise max over off-diagonal entries of a square matrix.
inline Tensor row_max_excluding_self(const Tensor& x) {
    return detail::row_max_impl(x, true, "row_max_excluding_self");
}

// ---------------------------------------------------------------------------
// normalizations

inline Tensor l2_normalize_rows(const Tensor& x) {
    detail::require_matrix(x, "l2_normalize_rows");
    const int m = x.rows(), n = x.cols();
    std::vector<double> out(x.values());
    auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            const double v = out[static_cast<std::size_t>(i) * n + j];
            s += v * v;
        }
        const double norm = std::sqrt(s);
        if (norm < 1e-150)
            throw std::runtime_error("l2_normalize_rows: zero-norm row");
        (*norms)[static_cast<std::size_t>(i)] = norm;
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] /= norm;
    }
    const int nx = x.node;
    const auto yv = std::make_shared<std::vector<double>>(out);
    return detail::make_result(x.shape(), std::move(out), x.tape,
        [nx, yv, norms, m, n](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (int i = 0; i < m; ++i) {
                const std::size_t o = static_cast<std::size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += g[o + j] * (*yv)[o + j];
                const double inv = 1.0 / (*norms)[static_cast<std::size_t>(i)];
                for (int j = 0; j < n; ++j)
                    gx[o + j] += (g[o + j] - (*yv)[o + j] * dot) * inv;
            }
        }, "l2_normalize_rows");
}

/// Row-wise layer normalization with learned gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    detail::require_matrix(x, "layer_norm");
    const int m = x.rows(), n = x.cols();
    if (gain.ndim() != 1 || gain.dim(0) != n || bias.ndim() != 1 || bias.dim(0) != n)
        throw std::invalid_argument("layer_norm: gain/bias length must equal column count");
    Tape* tape = detail::common_tape({&x, &gain, &bias});
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m) * n);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += xv[o + j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = xv[o + j] - mean;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(i)] = inv;
        for (int j = 0; j < n; ++j) {
            const double h = (xv[o + j] - mean) * inv;
            (*xhat)[o + j] = h;
            out[o + j] = gv[static_cast<std::size_t>(j)] * h + bv[static_cast<std::size_t>(j)];
        }
    }
    const int nx = x.node, ng = gain.node, nb = bias.node;
    const auto gd = gain.data();
    return detail::make_result(x.shape(), std::move(out), tape,
        [nx, ng, nb, gd, xhat, inv_std, m, n](const std::vector<double>& g, Tape& t) {
            if (ng >= 0) {
                auto& gg = t.grad_buffer(ng);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        gg[static_cast<std::size_t>(j)] +=
                            g[static_cast<std::size_t>(i) * n + j] * (*xhat)[static_cast<std::size_t>(i) * n + j];
            }
            if (nb >= 0) {
                auto& gb = t.grad_buffer(nb);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
            }
            if (nx >= 0) {
                auto& gx = t.grad_buffer(nx);
                for (int i = 0; i < m; ++i) {
                    const std::size_t o = static_cast<std::size_t>(i) * n;
                    double mean_dy = 0.0, mean_dyx = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double dy = g[o + j] * (*gd)[static_cast<std::size_t>(j)];
                        mean_dy += dy;
                        mean_dyx += dy * (*xhat)[o + j];
                    }
                    mean_dy /= n;
                    mean_dyx /= n;
                    const double inv = (*inv_std)[static_cast<std::size_t>(i)];
                    for (int j = 0; j < n; ++j) {
                        const double dy = g[o + j] * (*gd)[static_cast<std::size_t>(j)];
                        gx[o + j] += (dy - mean_dy - (*xhat)[o + j] * mean_dyx) * inv;
                    }
                }
            }
        }, "layer_norm");
}

inline Tensor softmax_rows(const Tensor& x) {
    detail::require_matrix(x, "softmax_rows");
    const int m = x.rows(), n = x.cols();
    std::vector<double> out(x.values());
    for (int i = 0; i < m; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * n;
        double mx = out[o];
        for (int j = 1; j < n; ++j) mx = std::max(mx, out[o + j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            out[o + j] = std::exp(out[o + j] - mx);
            s += out[o + j];
        }
        for (int j = 0; j < n; ++j) out[o + j] /= s;
    }
    const int nx = x.node;
    const auto yv = std::make_shared<std::vector<double>>(out);
    return detail::make_result(x.shape(), std::move(out), x.tape,
        [nx, yv, m, n](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (int i = 0; i < m; ++i) {
                const std::size_t o = static_cast<std::size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += g[o + j] * (*yv)[o + j];
                for (int j = 0; j < n; ++j)
                    gx[o + j] += (*yv)[o + j] * (g[o + j] - dot);
            }
        }, "softmax_rows");
}

// ---------------------------------------------------------------------------
// clamping and log-sum-exp

/// out_i = min(x_i, cap). Gradient passes where x_i <= cap (the boundary
/// point counts as unsaturated) and is exactly zero where x_i > cap.
inline Tensor clamp_upper(const Tensor& x, double cap) {
    if (!std::isfinite(cap)) throw std::invalid_argument("clamp_upper: cap must be finite");
    std::vector<double> out(x.values());
    auto pass = std::make_shared<std::vector<char>>(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*pass)[i] = out[i] <= cap ? 1 : 0;
        if (out[i] > cap) out[i] = cap;
    }
    const int nx = x.node;
    return detail::make_result(x.shape(), std::move(out), x.tape,
        [nx, pass](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*pass)[i]) gx[i] += g[i];
        }, "clamp_upper");
}

/// out_u = log(sum_{k != u} exp(G_uk)) for a square matrix G. No internal
/// shift is applied: callers are expected to have already stabilized the
/// logits, and an argument outside the safe exp range is an error.
inline Tensor row_logsumexp_excluding_self(const Tensor& g_mat) {
    detail::require_matrix(g_mat, "row_logsumexp_excluding_self");
    const int n = g_mat.rows();
    if (g_mat.cols() != n)
        throw std::invalid_argument("row_logsumexp_excluding_self: matrix must be square");
    if (n < 2)
        throw std::invalid_argument("row_logsumexp_excluding_self: need at least two rows");
    const auto& xv = g_mat.values();
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int u = 0; u < n; ++u) {
        double s = 0.0;
        for (int k = 0; k < n; ++k) {
            if (k == u) continue;
            const double a = xv[static_cast<std::size_t>(u) * n + k];
            if (a > 709.0)
                throw std::runtime_error(
                    "row_logsumexp_excluding_self: logit exceeds safe exp range "
                    "(missing stability shift)");
            s += std::exp(a);
        }
        out[static_cast<std::size_t>(u)] = std::log(s);
    }
    const int nx = g_mat.node;
    const auto xd = g_mat.data();
    const auto ov = std::make_shared<std::vector<double>>(out);
    return detail::make_result({n}, std::move(out), g_mat.tape,
        [nx, xd, ov, n](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (int u = 0; u < n; ++u)
                for (int k = 0; k < n; ++k) {
                    if (k == u) continue;
                    gx[static_cast<std::size_t>(u) * n + k] +=
                        g[static_cast<std::size_t>(u)] *
                        std::exp((*xd)[static_cast<std::size_t>(u) * n + k] - (*ov)[static_cast<std::size_t>(u)]);
                }
        }, "row_logsumexp_excluding_self");
}

/// Full-row log-sum-exp with an internal max shift (used by the linear
/// probe's cross-entropy).
inline Tensor row_logsumexp(const Tensor& x) {
    detail::require_matrix(x, "row_logsumexp");
    const int m = x.rows(), n = x.cols();
    const auto& xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * n;
        double mx = xv[o];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xv[o + j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += std::exp(xv[o + j] - mx);
        out[static_cast<std::size_t>(i)] = mx + std::log(s);
    }
    const int nx = x.node;
    const auto xd = x.data();
    const auto ov = std::make_shared<std::vector<double>>(out);
    return detail::make_result({m}, std::move(out), x.tape,
        [nx, xd, ov, m, n](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gx[static_cast<std::size_t>(i) * n + j] +=
                        g[static_cast<std::size_t>(i)] *
                        std::exp((*xd)[static_cast<std::size_t>(i) * n + j] - (*ov)[static_cast<std::size_t>(i)]);
        }, "row_logsumexp");
}

// ---------------------------------------------------------------------------
// shape surgery

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const int n = parts[0].cols();
    int m = 0;
    Tape* tape = nullptr;
    for (const Tensor& p : parts) {
        detail::require_matrix(p, "concat_rows");
        if (p.cols() != n) throw std::invalid_argument("concat_rows: column counts differ");
        m += p.rows();
        if (p.on_tape()) {
            if (tape && tape != p.tape)
                throw std::invalid_argument("concat_rows: operands on different tapes");
            tape = p.tape;
        }
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m) * n);
    std::vector<int> nodes;
    std::vector<int> row_counts;
    for (const Tensor& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
        nodes.push_back(p.node);
        row_counts.push_back(p.rows());
    }
    return detail::make_result({m, n}, std::move(out), tape,
        [nodes, row_counts, n](const std::vector<double>& g, Tape& t) {
            std::size_t off = 0;
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                const std::size_t cnt = static_cast<std::size_t>(row_counts[p]) * n;
                if (nodes[p] >= 0) {
                    auto& gp = t.grad_buffer(nodes[p]);
                    for (std::size_t i = 0; i < cnt; ++i) gp[i] += g[off + i];
                }
                off += cnt;
            }
        }, "concat_rows");
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int m = parts[0].rows();
    int n = 0;
    Tape* tape = nullptr;
    for (const Tensor& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.rows() != m) throw std::invalid_argument("concat_cols: row counts differ");
        n += p.cols();
        if (p.on_tape()) {
            if (tape && tape != p.tape)
                throw std::invalid_argument("concat_cols: operands on different tapes");
            tape = p.tape;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    std::vector<int> nodes, col_counts, col_offsets;
    int coff = 0;
    for (const Tensor& p : parts) {
        const auto& pv = p.values();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < p.cols(); ++j)
                out[static_cast<std::size_t>(i) * n + coff + j] = pv[static_cast<std::size_t>(i) * p.cols() + j];
        nodes.push_back(p.node);
        col_counts.push_back(p.cols());
        col_offsets.push_back(coff);
        coff += p.cols();
    }
    return detail::make_result({m, n}, std::move(out), tape,
        [nodes, col_counts, col_offsets, m, n](const std::vector<double>& g, Tape& t) {
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                if (nodes[p] < 0) continue;
                auto& gp = t.grad_buffer(nodes[p]);
                const int pc = col_counts[p], po = col_offsets[p];
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < pc; ++j)
                        gp[static_cast<std::size_t>(i) * pc + j] += g[static_cast<std::size_t>(i) * n + po + j];
            }
        }, "concat_cols");
}

/// Contiguous submatrix [r0, r0+nr) x [c0, c0+nc).
inline Tensor block(const Tensor& x, int r0, int nr, int c0, int nc) {
    detail::require_matrix(x, "block");
    const int m = x.rows(), n = x.cols();
    if (r0 < 0 || nr < 1 || r0 + nr > m || c0 < 0 || nc < 1 || c0 + nc > n)
        throw std::invalid_argument("block: region out of range");
    std::vector<double> out(static_cast<std::size_t>(nr) * nc);
    const auto& xv = x.values();
    for (int i = 0; i < nr; ++i)
        for (int j = 0; j < nc; ++j)
            out[static_cast<std::size_t>(i) * nc + j] = xv[static_cast<std::size_t>(r0 + i) * n + c0 + j];
    const int nx = x.node;
    return detail::make_result({nr, nc}, std::move(out), x.tape,
        [nx, r0, c0, nr, nc, n](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (int i = 0; i < nr; ++i)
                for (int j = 0; j < nc; ++j)
                    gx[static_cast<std::size_t>(r0 + i) * n + c0 + j] += g[static_cast<std::size_t>(i) * nc + j];
        }, "block");
}

inline Tensor slice_rows(const Tensor& x, int r0, int nr) {
    return block(x, r0, nr, 0, x.cols());
}

inline Tensor gather_rows(const Tensor& x, const std::vector<int>& indices) {
    detail::require_matrix(x, "gather_rows");
    const int m = x.rows(), n = x.cols();
    std::vector<double> out;
    out.reserve(indices.size() * static_cast<std::size_t>(n));
    const auto& xv = x.values();
    for (int idx : indices) {
        if (idx < 0 || idx >= m) throw std::invalid_argument("gather_rows: index out of range");
        out.insert(out.end(), xv.begin() + static_cast<std::ptrdiff_t>(idx) * n,
                   xv.begin() + static_cast<std::ptrdiff_t>(idx + 1) * n);
    }
    const int nx = x.node;
    const auto idxs = std::make_shared<std::vector<int>>(indices);
    return detail::make_result({static_cast<int>(indices.size()), n}, std::move(out), x.tape,
        [nx, idxs, n](const std::vector<double>& g, Tape& t) {
            if (nx < 0) return;
            auto& gx = t.grad_buffer(nx);
            for (std::size_t r = 0; r < idxs->size(); ++r)
                for (int j = 0; j < n; ++j)
                    gx[static_cast<std::size_t>((*idxs)[r]) * n + j] += g[r * static_cast<std::size_t>(n) + j];
        }, "gather_rows");
}

}  // namespace cff
