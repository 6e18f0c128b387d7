#ifndef DOME_OPS_HPP
#define DOME_OPS_HPP

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <vector>

#include "dome/tensor.hpp"

namespace dome {

template <typename R>
using MatRM = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename R>
using MatMap = Eigen::Map<MatRM<R>>;
template <typename R>
using ConstMatMap = Eigen::Map<const MatRM<R>>;

// Eigen's packetized kernels peel loops based on the runtime alignment of the
// data pointer, so products and reductions evaluated directly on views of
// tensor storage can differ by a few ulp between calls that see differently
// aligned allocations. Every Eigen computation below therefore runs on owned
// matrices (fixed Eigen-allocator alignment); maps over tensor storage are
// used only for copies in and plain element-wise stores out, which are
// value-exact regardless of vectorization.
template <typename R>
MatRM<R> owned_mat(const R* p, int rows, int cols) {
    return ConstMatMap<R>(p, rows, cols);
}

namespace detail {

template <typename R>
std::vector<R>& grad_of(Tensor<R>& t) {
    return t.grad();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Broadcast mode for binary elementwise ops.
enum class Bcast { Same, Scalar, LastDim };

template <typename R>
Bcast bcast_mode(const char* op, const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.numel() == 1) return Bcast::Scalar;
    if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.shape().back()) return Bcast::LastDim;
    throw std::invalid_argument(str(op, ": incompatible shapes ", shape_str(a.shape()),
                                    " and ", shape_str(b.shape())));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename R, typename FwdFn, typename DaFn, typename DbFn>
Tensor<R> binary_ew(const char* name, Tensor<R> a, Tensor<R> b,
                    FwdFn fwd, DaFn da_fn, DbFn db_fn) {
    auto mode = detail::bcast_mode(name, a, b);
    auto out = Tensor<R>::make_op(
        name, a.shape(), {a, b},
        [a, b, mode, da_fn, db_fn](typename Tensor<R>::Node& n) mutable {
            size_t count = n.value.size();
            size_t last = static_cast<size_t>(a.shape().back());
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (size_t i = 0; i < count; ++i) {
                    size_t bi = mode == detail::Bcast::Same ? i
                              : mode == detail::Bcast::Scalar ? 0 : i % last;
                    ga[i] += da_fn(a.values()[i], b.values()[bi]) * n.grad[i];
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (size_t i = 0; i < count; ++i) {
                    size_t bi = mode == detail::Bcast::Same ? i
                              : mode == detail::Bcast::Scalar ? 0 : i % last;
                    gb[bi] += db_fn(a.values()[i], b.values()[bi]) * n.grad[i];
                }
            }
        });
    size_t count = out.numel();
    size_t last = static_cast<size_t>(a.shape().back());
    for (size_t i = 0; i < count; ++i) {
        size_t bi = mode == detail::Bcast::Same ? i
                  : mode == detail::Bcast::Scalar ? 0 : i % last;
        out.values()[i] = fwd(a.values()[i], b.values()[bi]);
    }
    return out;
}

template <typename R>
Tensor<R> add(Tensor<R> a, Tensor<R> b) {
    return binary_ew<R>("add", a, b,
                        [](R x, R y) { return x + y; },
                        [](R, R) { return R(1); },
                        [](R, R) { return R(1); });
}

template <typename R>
Tensor<R> sub(Tensor<R> a, Tensor<R> b) {
    return binary_ew<R>("sub", a, b,
                        [](R x, R y) { return x - y; },
                        [](R, R) { return R(1); },
                        [](R, R) { return R(-1); });
}

template <typename R>
Tensor<R> mul(Tensor<R> a, Tensor<R> b) {
    return binary_ew<R>("mul", a, b,
                        [](R x, R y) { return x * y; },
                        [](R, R y) { return y; },
                        [](R x, R) { return x; });
}

template <typename R, typename FwdFn, typename DFn>
Tensor<R> unary_ew(const char* name, Tensor<R> x, FwdFn fwd, DFn dfn) {
    auto out = Tensor<R>::make_op(
        name, x.shape(), {x},
        [x, dfn](typename Tensor<R>::Node& n) mutable {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            for (size_t i = 0; i < n.value.size(); ++i)
                gx[i] += dfn(x.values()[i], n.value[i]) * n.grad[i];
        });
    for (size_t i = 0; i < out.numel(); ++i) out.values()[i] = fwd(x.values()[i]);
    return out;
}

template <typename R>
Tensor<R> scale(Tensor<R> x, R c) {
    return unary_ew<R>("scale", x, [c](R v) { return c * v; }, [c](R, R) { return c; });
}

template <typename R>
Tensor<R> add_scalar(Tensor<R> x, R c) {
    return unary_ew<R>("add_scalar", x, [c](R v) { return v + c; }, [](R, R) { return R(1); });
}

// Gradient is 1 strictly inside [lo, hi], 0 outside (and at the clamped
// boundary).
template <typename R>
Tensor<R> clamp(Tensor<R> x, R lo, R hi) {
    return unary_ew<R>(
        "clamp", x,
        [lo, hi](R v) { return std::min(hi, std::max(lo, v)); },
        [lo, hi](R v, R) { return (v > lo && v < hi) ? R(1) : R(0); });
}

template <typename R>
Tensor<R> exp(Tensor<R> x) {
    return unary_ew<R>("exp", x, [](R v) { return std::exp(v); }, [](R, R y) { return y; });
}

template <typename R>
Tensor<R> log(Tensor<R> x) {
    return unary_ew<R>("log", x, [](R v) { return std::log(v); }, [](R v, R) { return R(1) / v; });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename R>
Tensor<R> gelu(Tensor<R> x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return unary_ew<R>(
        "gelu", x,
        [](R v) {
            return static_cast<R>(0.5 * static_cast<double>(v) *
                                  (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
        },
        [](R v, R) {
            double d = static_cast<double>(v);
            double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
            return static_cast<R>(cdf + d * pdf);
        });
}

template <typename R>
Tensor<R> sum(Tensor<R> x) {
    auto out = Tensor<R>::make_op(
        "sum", {1}, {x},
        [x](typename Tensor<R>::Node& n) mutable {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            for (auto& g : gx) g += n.grad[0];
        });
    R acc = R(0);
    for (R v : x.values()) acc += v;
    out.values()[0] = acc;
    return out;
}

template <typename R>
Tensor<R> mean(Tensor<R> x) {
    R inv = R(1) / static_cast<R>(x.numel());
    auto out = Tensor<R>::make_op(
        "mean", {1}, {x},
        [x, inv](typename Tensor<R>::Node& n) mutable {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            for (auto& g : gx) g += inv * n.grad[0];
        });
    R acc = R(0);
    for (R v : x.values()) acc += v;
    out.values()[0] = acc * inv;
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename R>
Tensor<R> matmul(Tensor<R> a, Tensor<R> b) {
    detail::require(a.rank() == 2 && b.rank() == 2,
                    str("matmul: expects rank-2 inputs, got ", shape_str(a.shape()), " and ",
                        shape_str(b.shape())));
    detail::require(a.dim(1) == b.dim(0),
                    str("matmul: inner dims ", a.dim(1), " vs ", b.dim(0)));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = Tensor<R>::make_op(
        "matmul", {m, n}, {a, b},
        [a, b, m, k, n](typename Tensor<R>::Node& node) mutable {
            MatRM<R> G = owned_mat(node.grad.data(), m, n);
            if (a.requires_grad()) {
                MatRM<R> B = owned_mat(b.data(), k, n);
                MatRM<R> GA(m, k);
                GA.noalias() = G * B.transpose();
                MatMap<R>(a.grad().data(), m, k) += GA;
            }
            if (b.requires_grad()) {
                MatRM<R> A = owned_mat(a.data(), m, k);
                MatRM<R> GB(k, n);
                GB.noalias() = A.transpose() * G;
                MatMap<R>(b.grad().data(), k, n) += GB;
            }
        });
    MatRM<R> A = owned_mat(a.data(), m, k);
    MatRM<R> B = owned_mat(b.data(), k, n);
    MatRM<R> C(m, n);
    C.noalias() = A * B;
    MatMap<R>(out.data(), m, n) = C;
    return out;
}

// x[..., in] * w[in, out] (+ bias[out]). Leading dims are batch.
template <typename R>
Tensor<R> linear(Tensor<R> x, Tensor<R> w, Tensor<R> bias = {}) {
    detail::require(w.rank() == 2, "linear: weight must be rank 2");
    int in = w.dim(0), outw = w.dim(1);
    detail::require(x.shape().back() == in,
                    str("linear: input features ", x.shape().back(), " vs weight rows ", in));
    if (bias.defined())
        detail::require(bias.rank() == 1 && bias.dim(0) == outw,
                        str("linear: bias length ", bias.numel(), " vs out features ", outw));
    int rows = static_cast<int>(x.numel()) / in;
    Shape out_shape = x.shape();
    out_shape.back() = outw;

    std::vector<Tensor<R>> inputs = {x, w};
    if (bias.defined()) inputs.push_back(bias);
    auto out = Tensor<R>::make_op(
        "linear", out_shape, inputs,
        [x, w, bias, rows, in, outw](typename Tensor<R>::Node& node) mutable {
            MatRM<R> G = owned_mat(node.grad.data(), rows, outw);
            if (x.requires_grad()) {
                MatRM<R> W = owned_mat(w.data(), in, outw);
                MatRM<R> GX(rows, in);
                GX.noalias() = G * W.transpose();
                MatMap<R>(x.grad().data(), rows, in) += GX;
            }
            if (w.requires_grad()) {
                MatRM<R> X = owned_mat(x.data(), rows, in);
                MatRM<R> GW(in, outw);
                GW.noalias() = X.transpose() * G;
                MatMap<R>(w.grad().data(), in, outw) += GW;
            }
            if (bias.defined() && bias.requires_grad()) {
                auto& gb = bias.grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < outw; ++c) gb[static_cast<size_t>(c)] += G(r, c);
            }
        });
    MatRM<R> X = owned_mat(x.data(), rows, in);
    MatRM<R> W = owned_mat(w.data(), in, outw);
    MatRM<R> Y(rows, outw);
    Y.noalias() = X * W;
    if (bias.defined()) {
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < outw; ++c) Y(r, c) += bias.values()[static_cast<size_t>(c)];
    }
    MatMap<R>(out.data(), rows, outw) = Y;
    return out;
}

// Layer normalization over the last axis; gamma/beta optional.
template <typename R>
Tensor<R> layer_norm(Tensor<R> x, Tensor<R> gamma = {}, Tensor<R> beta = {},
                     double eps = 1e-5) {
    int c = x.shape().back();
    int rows = static_cast<int>(x.numel()) / c;
    if (gamma.defined())
        detail::require(gamma.rank() == 1 && gamma.dim(0) == c, "layer_norm: gamma length mismatch");
    if (beta.defined())
        detail::require(beta.rank() == 1 && beta.dim(0) == c, "layer_norm: beta length mismatch");

    auto xhat = std::make_shared<std::vector<R>>(x.numel());
    auto inv_std = std::make_shared<std::vector<R>>(rows);

    std::vector<Tensor<R>> inputs = {x};
    if (gamma.defined()) inputs.push_back(gamma);
    if (beta.defined()) inputs.push_back(beta);
    auto out = Tensor<R>::make_op(
        "layer_norm", x.shape(), inputs,
        [x, gamma, beta, xhat, inv_std, rows, c](typename Tensor<R>::Node& node) mutable {
            for (int r = 0; r < rows; ++r) {
                const R* xh = xhat->data() + static_cast<size_t>(r) * c;
                const R* gr = node.grad.data() + static_cast<size_t>(r) * c;
                // Effective upstream grad through the affine part.
                R mean_g = R(0), mean_gx = R(0);
                for (int i = 0; i < c; ++i) {
                    R ge = gr[i];
                    if (gamma.defined()) ge *= gamma.values()[static_cast<size_t>(i)];
                    mean_g += ge;
                    mean_gx += ge * xh[i];
                }
                mean_g /= static_cast<R>(c);
                mean_gx /= static_cast<R>(c);
                if (x.requires_grad()) {
                    R* gx = x.grad().data() + static_cast<size_t>(r) * c;
                    R istd = (*inv_std)[static_cast<size_t>(r)];
                    for (int i = 0; i < c; ++i) {
                        R ge = gr[i];
                        if (gamma.defined()) ge *= gamma.values()[static_cast<size_t>(i)];
                        gx[i] += istd * (ge - mean_g - xh[i] * mean_gx);
                    }
                }
                if (gamma.defined() && gamma.requires_grad()) {
                    auto& gg = gamma.grad();
                    for (int i = 0; i < c; ++i) gg[static_cast<size_t>(i)] += gr[i] * xh[i];
                }
                if (beta.defined() && beta.requires_grad()) {
                    auto& gb = beta.grad();
                    for (int i = 0; i < c; ++i) gb[static_cast<size_t>(i)] += gr[i];
                }
            }
        });
    for (int r = 0; r < rows; ++r) {
        const R* xr = x.data() + static_cast<size_t>(r) * c;
        R* yr = out.data() + static_cast<size_t>(r) * c;
        R* xh = xhat->data() + static_cast<size_t>(r) * c;
        R mu = R(0);
        for (int i = 0; i < c; ++i) mu += xr[i];
        mu /= static_cast<R>(c);
        R var = R(0);
        for (int i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<R>(c);
        R istd = static_cast<R>(1.0 / std::sqrt(static_cast<double>(var) + eps));
        (*inv_std)[static_cast<size_t>(r)] = istd;
        for (int i = 0; i < c; ++i) {
            xh[i] = (xr[i] - mu) * istd;
            R y = xh[i];
            if (gamma.defined()) y *= gamma.values()[static_cast<size_t>(i)];
            if (beta.defined()) y += beta.values()[static_cast<size_t>(i)];
            yr[i] = y;
        }
    }
    return out;
}

// Softmax over the last axis.
template <typename R>
Tensor<R> softmax(Tensor<R> x) {
    int c = x.shape().back();
    int rows = static_cast<int>(x.numel()) / c;
    auto out = Tensor<R>::make_op(
        "softmax", x.shape(), {x},
        [x, rows, c](typename Tensor<R>::Node& node) mutable {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            for (int r = 0; r < rows; ++r) {
                const R* y = node.value.data() + static_cast<size_t>(r) * c;
                const R* gy = node.grad.data() + static_cast<size_t>(r) * c;
                R dot = R(0);
                for (int i = 0; i < c; ++i) dot += gy[i] * y[i];
                R* g = gx.data() + static_cast<size_t>(r) * c;
                for (int i = 0; i < c; ++i) g[i] += y[i] * (gy[i] - dot);
            }
        });
    for (int r = 0; r < rows; ++r) {
        const R* xr = x.data() + static_cast<size_t>(r) * c;
        R* yr = out.data() + static_cast<size_t>(r) * c;
        R mx = xr[0];
        for (int i = 1; i < c; ++i) mx = std::max(mx, xr[i]);
        R acc = R(0);
        for (int i = 0; i < c; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            acc += yr[i];
        }
        R inv = R(1) / acc;
        for (int i = 0; i < c; ++i) yr[i] *= inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename R>
Tensor<R> reshape(Tensor<R> x, Shape shape) {
    detail::require(shape_numel(shape) == x.numel(),
                    str("reshape: cannot view ", shape_str(x.shape()), " as ", shape_str(shape)));
    auto out = Tensor<R>::make_op(
        "reshape", shape, {x},
        [x](typename Tensor<R>::Node& node) mutable {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            for (size_t i = 0; i < node.grad.size(); ++i) gx[i] += node.grad[i];
        });
    out.values() = x.values();
    return out;
}

namespace detail {

inline std::vector<size_t> row_major_strides(const Shape& s) {
    std::vector<size_t> st(s.size());
    size_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= static_cast<size_t>(s[static_cast<size_t>(i)]);
    }
    return st;
}

}  // namespace detail

// Generalized transpose: out[i...] = x[perm applied]. perm maps output axis
// to input axis.
template <typename R>
Tensor<R> permute(Tensor<R> x, const std::vector<int>& perm) {
    detail::require(perm.size() == static_cast<size_t>(x.rank()),
                    "permute: perm length must equal rank");
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i)
        out_shape[i] = x.dim(perm[i]);
    auto in_strides = detail::row_major_strides(x.shape());
    auto index_map = std::make_shared<std::vector<size_t>>(x.numel());
    {
        std::vector<int> idx(perm.size(), 0);
        for (size_t o = 0; o < x.numel(); ++o) {
            size_t src = 0;
            for (size_t a = 0; a < perm.size(); ++a)
                src += static_cast<size_t>(idx[a]) * in_strides[static_cast<size_t>(perm[a])];
            (*index_map)[o] = src;
            for (int a = static_cast<int>(perm.size()) - 1; a >= 0; --a) {
                if (++idx[static_cast<size_t>(a)] < out_shape[static_cast<size_t>(a)]) break;
                idx[static_cast<size_t>(a)] = 0;
            }
        }
    }
    auto out = Tensor<R>::make_op(
        "permute", out_shape, {x},
        [x, index_map](typename Tensor<R>::Node& node) mutable {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            for (size_t o = 0; o < node.grad.size(); ++o) gx[(*index_map)[o]] += node.grad[o];
        });
    for (size_t o = 0; o < out.numel(); ++o) out.values()[o] = x.values()[(*index_map)[o]];
    return out;
}

template <typename R>
Tensor<R> transpose2d(Tensor<R> x) {
    detail::require(x.rank() == 2, "transpose2d: expects rank 2");
    return permute(x, {1, 0});
}

template <typename R>
Tensor<R> concat(const std::vector<Tensor<R>>& xs, int axis) {
    detail::require(!xs.empty(), "concat: empty input list");
    Shape out_shape = xs[0].shape();
    detail::require(axis >= 0 && axis < xs[0].rank(), "concat: axis out of range");
    int total = 0;
    for (const auto& t : xs) {
        detail::require(t.rank() == xs[0].rank(), "concat: rank mismatch");
        for (int a = 0; a < t.rank(); ++a)
            if (a != axis)
                detail::require(t.dim(a) == xs[0].dim(a),
                                str("concat: dim ", a, " mismatch: ", t.dim(a), " vs ",
                                    xs[0].dim(a)));
        total += t.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;

    size_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= static_cast<size_t>(xs[0].dim(a));
    for (int a = axis + 1; a < xs[0].rank(); ++a) inner *= static_cast<size_t>(xs[0].dim(a));

    auto parts = xs;
    auto out = Tensor<R>::make_op(
        "concat", out_shape, xs,
        [parts, outer, inner, total, axis](typename Tensor<R>::Node& node) mutable {
            size_t offset = 0;
            for (auto& t : parts) {
                size_t width = static_cast<size_t>(t.dim(axis)) * inner;
                if (t.requires_grad()) {
                    auto& g = t.grad();
                    for (size_t o = 0; o < outer; ++o) {
                        const R* src = node.grad.data() +
                                       (o * static_cast<size_t>(total) * inner) + offset;
                        R* dst = g.data() + o * width;
                        for (size_t i = 0; i < width; ++i) dst[i] += src[i];
                    }
                }
                offset += width;
            }
        });
    size_t offset = 0;
    for (const auto& t : xs) {
        size_t width = static_cast<size_t>(t.dim(axis)) * inner;
        for (size_t o = 0; o < outer; ++o) {
            const R* src = t.data() + o * width;
            R* dst = out.data() + (o * static_cast<size_t>(total) * inner) + offset;
            std::copy(src, src + width, dst);
        }
        offset += width;
    }
    return out;
}

template <typename R>
Tensor<R> slice(Tensor<R> x, int axis, int start, int len) {
    detail::require(axis >= 0 && axis < x.rank(), "slice: axis out of range");
    detail::require(start >= 0 && len >= 0 && start + len <= x.dim(axis),
                    str("slice: range [", start, ",", start + len, ") out of dim ", x.dim(axis)));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    size_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= static_cast<size_t>(x.dim(a));
    for (int a = axis + 1; a < x.rank(); ++a) inner *= static_cast<size_t>(x.dim(a));
    size_t in_width = static_cast<size_t>(x.dim(axis)) * inner;
    size_t out_width = static_cast<size_t>(len) * inner;
    size_t skip = static_cast<size_t>(start) * inner;

    auto out = Tensor<R>::make_op(
        "slice", out_shape, {x},
        [x, outer, inner, in_width, out_width, skip](typename Tensor<R>::Node& node) mutable {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            for (size_t o = 0; o < outer; ++o) {
                const R* src = node.grad.data() + o * out_width;
                R* dst = gx.data() + o * in_width + skip;
                for (size_t i = 0; i < out_width; ++i) dst[i] += src[i];
            }
        });
    for (size_t o = 0; o < outer; ++o) {
        const R* src = x.data() + o * in_width + skip;
        R* dst = out.data() + o * out_width;
        std::copy(src, src + out_width, dst);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

// table[N, C] indexed by ids; output shape = ids_shape + [C].
template <typename R>
Tensor<R> embedding_lookup(Tensor<R> table, const std::vector<int>& ids, Shape ids_shape) {
    detail::require(table.rank() == 2, "embedding_lookup: table must be rank 2");
    detail::require(shape_numel(ids_shape) == ids.size(),
                    "embedding_lookup: ids shape does not match id count");
    int n = table.dim(0), c = table.dim(1);
    for (int id : ids)
        detail::require(id >= 0 && id < n,
                        str("embedding_lookup: id ", id, " out of range [0,", n, ")"));
    Shape out_shape = ids_shape;
    out_shape.push_back(c);
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    auto out = Tensor<R>::make_op(
        "embedding_lookup", out_shape, {table},
        [table, ids_copy, c](typename Tensor<R>::Node& node) mutable {
            if (!table.requires_grad()) return;
            auto& gt = table.grad();
            for (size_t i = 0; i < ids_copy->size(); ++i) {
                const R* src = node.grad.data() + i * static_cast<size_t>(c);
                R* dst = gt.data() + static_cast<size_t>((*ids_copy)[i]) * c;
                for (int j = 0; j < c; ++j) dst[j] += src[j];
            }
        });
    for (size_t i = 0; i < ids.size(); ++i) {
        const R* src = table.data() + static_cast<size_t>(ids[i]) * c;
        R* dst = out.data() + i * static_cast<size_t>(c);
        std::copy(src, src + c, dst);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

// x[H, W, Ci], w[kh, kw, Ci, Co], bias[Co]. Zero padding, floor output dims.
template <typename R>
Tensor<R> conv2d(Tensor<R> x, Tensor<R> w, Tensor<R> bias, int stride, int pad) {
    detail::require(x.rank() == 3, "conv2d: input must be [H,W,C]");
    detail::require(w.rank() == 4, "conv2d: weight must be [kh,kw,Cin,Cout]");
    detail::require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    int h = x.dim(0), wd = x.dim(1), ci = x.dim(2);
    int kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
    detail::require(w.dim(2) == ci,
                    str("conv2d: input channels ", ci, " vs weight channels ", w.dim(2)));
    if (bias.defined())
        detail::require(bias.rank() == 1 && bias.dim(0) == co, "conv2d: bias length mismatch");
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    detail::require(ho >= 1 && wo >= 1, "conv2d: kernel larger than padded input");

    int patch = kh * kw * ci;
    int rows = ho * wo;
    auto col = std::make_shared<std::vector<R>>(static_cast<size_t>(rows) * patch, R(0));
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            R* dst = col->data() + (static_cast<size_t>(oy) * wo + ox) * patch;
            for (int ty = 0; ty < kh; ++ty) {
                int iy = oy * stride - pad + ty;
                if (iy < 0 || iy >= h) continue;
                for (int tx = 0; tx < kw; ++tx) {
                    int ix = ox * stride - pad + tx;
                    if (ix < 0 || ix >= wd) continue;
                    const R* src = x.data() + (static_cast<size_t>(iy) * wd + ix) * ci;
                    std::copy(src, src + ci, dst + (static_cast<size_t>(ty) * kw + tx) * ci);
                }
            }
        }
    }

    std::vector<Tensor<R>> inputs = {x, w};
    if (bias.defined()) inputs.push_back(bias);
    auto out = Tensor<R>::make_op(
        "conv2d", {ho, wo, co}, inputs,
        [x, w, bias, col, rows, patch, h, wd, ci, kh, kw, co, ho, wo, stride,
         pad](typename Tensor<R>::Node& node) mutable {
            MatRM<R> G = owned_mat(node.grad.data(), rows, co);
            if (w.requires_grad()) {
                MatRM<R> Col = owned_mat(col->data(), rows, patch);
                MatRM<R> GW(patch, co);
                GW.noalias() = Col.transpose() * G;
                MatMap<R>(w.grad().data(), patch, co) += GW;
            }
            if (bias.defined() && bias.requires_grad()) {
                auto& gb = bias.grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < co; ++c) gb[static_cast<size_t>(c)] += G(r, c);
            }
            if (x.requires_grad()) {
                MatRM<R> dcol(rows, patch);
                MatRM<R> W = owned_mat(w.data(), patch, co);
                dcol.noalias() = G * W.transpose();
                auto& gx = x.grad();
                for (int oy = 0; oy < ho; ++oy) {
                    for (int ox = 0; ox < wo; ++ox) {
                        const R* src = dcol.data() + (static_cast<size_t>(oy) * wo + ox) * patch;
                        for (int ty = 0; ty < kh; ++ty) {
                            int iy = oy * stride - pad + ty;
                            if (iy < 0 || iy >= h) continue;
                            for (int tx = 0; tx < kw; ++tx) {
                                int ix = ox * stride - pad + tx;
                                if (ix < 0 || ix >= wd) continue;
                                R* dst = gx.data() + (static_cast<size_t>(iy) * wd + ix) * ci;
                                const R* s = src + (static_cast<size_t>(ty) * kw + tx) * ci;
                                for (int c = 0; c < ci; ++c) dst[c] += s[c];
                            }
                        }
                    }
                }
            }
        });
    MatRM<R> Col = owned_mat(col->data(), rows, patch);
    MatRM<R> W = owned_mat(w.data(), patch, co);
    MatRM<R> Y(rows, co);
    Y.noalias() = Col * W;
    if (bias.defined())
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < co; ++c) Y(r, c) += bias.values()[static_cast<size_t>(c)];
    MatMap<R>(out.data(), rows, co) = Y;
    return out;
}

namespace detail {

struct Conv3dDims {
    int x, y, z, ci;
    int kx, ky, kz, co;
    int ox, oy, oz;
    int stride, pad;
};

template <typename R>
Conv3dDims conv3d_dims(const Tensor<R>& x, const Tensor<R>& w, int stride, int pad) {
    require(x.rank() == 4, "conv3d: input must be [X,Y,Z,C]");
    require(w.rank() == 5, "conv3d: weight must be [kx,ky,kz,Cin,Cout]");
    require(stride >= 1 && pad >= 0, "conv3d: bad stride/pad");
    Conv3dDims d;
    d.x = x.dim(0); d.y = x.dim(1); d.z = x.dim(2); d.ci = x.dim(3);
    d.kx = w.dim(0); d.ky = w.dim(1); d.kz = w.dim(2); d.co = w.dim(4);
    require(w.dim(3) == d.ci,
            str("conv3d: input channels ", d.ci, " vs weight channels ", w.dim(3)));
    d.stride = stride; d.pad = pad;
    d.ox = (d.x + 2 * pad - d.kx) / stride + 1;
    d.oy = (d.y + 2 * pad - d.ky) / stride + 1;
    d.oz = (d.z + 2 * pad - d.kz) / stride + 1;
    require(d.ox >= 1 && d.oy >= 1 && d.oz >= 1, "conv3d: kernel larger than padded input");
    return d;
}

// Walks every (output position, kernel tap) pair that touches an in-bounds
// input voxel and invokes fn(in_offset, out_offset, tap_offset); offsets are
// in units of channel vectors.
template <typename Fn>
void conv3d_walk(const Conv3dDims& d, Fn&& fn) {
    for (int ax = 0; ax < d.ox; ++ax)
        for (int tx = 0; tx < d.kx; ++tx) {
            int ix = ax * d.stride - d.pad + tx;
            if (ix < 0 || ix >= d.x) continue;
            for (int ay = 0; ay < d.oy; ++ay)
                for (int ty = 0; ty < d.ky; ++ty) {
                    int iy = ay * d.stride - d.pad + ty;
                    if (iy < 0 || iy >= d.y) continue;
                    for (int az = 0; az < d.oz; ++az)
                        for (int tz = 0; tz < d.kz; ++tz) {
                            int iz = az * d.stride - d.pad + tz;
                            if (iz < 0 || iz >= d.z) continue;
                            size_t in_off = (static_cast<size_t>(ix) * d.y + iy) * d.z + iz;
                            size_t out_off = (static_cast<size_t>(ax) * d.oy + ay) * d.oz + az;
                            size_t tap_off = (static_cast<size_t>(tx) * d.ky + ty) * d.kz + tz;
                            fn(in_off, out_off, tap_off);
                        }
                }
        }
}

}  // namespace detail

template <typename R>
Tensor<R> conv3d(Tensor<R> x, Tensor<R> w, Tensor<R> bias, int stride, int pad) {
    auto d = detail::conv3d_dims(x, w, stride, pad);
    if (bias.defined())
        detail::require(bias.rank() == 1 && bias.dim(0) == d.co, "conv3d: bias length mismatch");
    std::vector<Tensor<R>> inputs = {x, w};
    if (bias.defined()) inputs.push_back(bias);
    auto out = Tensor<R>::make_op(
        "conv3d", {d.ox, d.oy, d.oz, d.co}, inputs,
        [x, w, bias, d](typename Tensor<R>::Node& node) mutable {
            bool gx_on = x.requires_grad();
            bool gw_on = w.requires_grad();
            R* gx = gx_on ? x.grad().data() : nullptr;
            R* gw = gw_on ? w.grad().data() : nullptr;
            detail::conv3d_walk(d, [&](size_t in_off, size_t out_off, size_t tap_off) {
                const R* go = node.grad.data() + out_off * d.co;
                const R* xv = x.data() + in_off * d.ci;
                const R* wt = w.data() + tap_off * d.ci * d.co;
                for (int c = 0; c < d.ci; ++c) {
                    const R* wr = wt + static_cast<size_t>(c) * d.co;
                    if (gx_on) {
                        R acc = R(0);
                        for (int o = 0; o < d.co; ++o) acc += wr[o] * go[o];
                        gx[in_off * d.ci + c] += acc;
                    }
                    if (gw_on) {
                        R* gwr = gw + tap_off * d.ci * d.co + static_cast<size_t>(c) * d.co;
                        R xc = xv[c];
                        for (int o = 0; o < d.co; ++o) gwr[o] += xc * go[o];
                    }
                }
            });
            if (bias.defined() && bias.requires_grad()) {
                auto& gb = bias.grad();
                size_t cells = node.grad.size() / d.co;
                for (size_t i = 0; i < cells; ++i)
                    for (int o = 0; o < d.co; ++o)
                        gb[static_cast<size_t>(o)] += node.grad[i * d.co + o];
            }
        });
    detail::conv3d_walk(d, [&](size_t in_off, size_t out_off, size_t tap_off) {
        const R* xv = x.data() + in_off * d.ci;
        const R* wt = w.data() + tap_off * d.ci * d.co;
        R* yo = out.data() + out_off * d.co;
        for (int c = 0; c < d.ci; ++c) {
            R xc = xv[c];
            const R* wr = wt + static_cast<size_t>(c) * d.co;
            for (int o = 0; o < d.co; ++o) yo[o] += xc * wr[o];
        }
    });
    if (bias.defined()) {
        size_t cells = out.numel() / d.co;
        for (size_t i = 0; i < cells; ++i)
            for (int o = 0; o < d.co; ++o)
                out.values()[i * d.co + o] += bias.values()[static_cast<size_t>(o)];
    }
    return out;
}

// Adjoint of conv3d with the same weight layout [kx,ky,kz,Cin,Cout]: maps a
// tensor shaped like conv3d's output (channels Cout) back to conv3d's input
// space (channels Cin). Default output spatial size is the minimal
// (n-1)*stride + k - 2*pad; out_dims may name any size that conv3d would
// floor down to the input dims (resolves the strided-conv ambiguity, making
// the operator the exact adjoint for that geometry). Bias, when given, is
// over Cin.
template <typename R>
Tensor<R> conv_transpose3d(Tensor<R> y, Tensor<R> w, Tensor<R> bias, int stride, int pad,
                           std::vector<int> out_dims = {}) {
    detail::require(y.rank() == 4, "conv_transpose3d: input must be [X,Y,Z,C]");
    detail::require(w.rank() == 5, "conv_transpose3d: weight must be [kx,ky,kz,Cin,Cout]");
    int co = w.dim(4), ci = w.dim(3);
    detail::require(y.dim(3) == co,
                    str("conv_transpose3d: input channels ", y.dim(3), " vs weight Cout ", co));
    detail::Conv3dDims d;
    d.kx = w.dim(0); d.ky = w.dim(1); d.kz = w.dim(2);
    d.ci = ci; d.co = co; d.stride = stride; d.pad = pad;
    d.ox = y.dim(0); d.oy = y.dim(1); d.oz = y.dim(2);
    d.x = (d.ox - 1) * stride + d.kx - 2 * pad;
    d.y = (d.oy - 1) * stride + d.ky - 2 * pad;
    d.z = (d.oz - 1) * stride + d.kz - 2 * pad;
    if (!out_dims.empty()) {
        detail::require(out_dims.size() == 3, "conv_transpose3d: out_dims must have 3 entries");
        int* mins[3] = {&d.x, &d.y, &d.z};
        for (int a = 0; a < 3; ++a) {
            detail::require(out_dims[static_cast<size_t>(a)] >= *mins[a] &&
                                out_dims[static_cast<size_t>(a)] < *mins[a] + stride,
                            str("conv_transpose3d: out_dims[", a, "]=",
                                out_dims[static_cast<size_t>(a)], " incompatible, minimal ",
                                *mins[a], " stride ", stride));
            *mins[a] = out_dims[static_cast<size_t>(a)];
        }
    }
    detail::require(d.x >= 1 && d.y >= 1 && d.z >= 1, "conv_transpose3d: degenerate output");
    if (bias.defined())
        detail::require(bias.rank() == 1 && bias.dim(0) == ci,
                        "conv_transpose3d: bias length mismatch");

    std::vector<Tensor<R>> inputs = {y, w};
    if (bias.defined()) inputs.push_back(bias);
    auto out = Tensor<R>::make_op(
        "conv_transpose3d", {d.x, d.y, d.z, ci}, inputs,
        [y, w, bias, d](typename Tensor<R>::Node& node) mutable {
            bool gy_on = y.requires_grad();
            bool gw_on = w.requires_grad();
            R* gy = gy_on ? y.grad().data() : nullptr;
            R* gw = gw_on ? w.grad().data() : nullptr;
            detail::conv3d_walk(d, [&](size_t in_off, size_t out_off, size_t tap_off) {
                const R* gout = node.grad.data() + in_off * d.ci;
                const R* yv = y.data() + out_off * d.co;
                const R* wt = w.data() + tap_off * d.ci * d.co;
                for (int c = 0; c < d.ci; ++c) {
                    const R* wr = wt + static_cast<size_t>(c) * d.co;
                    R gc = gout[c];
                    if (gy_on) {
                        R* gyr = gy + out_off * d.co;
                        for (int o = 0; o < d.co; ++o) gyr[o] += wr[o] * gc;
                    }
                    if (gw_on) {
                        R* gwr = gw + tap_off * d.ci * d.co + static_cast<size_t>(c) * d.co;
                        for (int o = 0; o < d.co; ++o) gwr[o] += yv[o] * gc;
                    }
                }
            });
            if (bias.defined() && bias.requires_grad()) {
                auto& gb = bias.grad();
                size_t cells = node.grad.size() / d.ci;
                for (size_t i = 0; i < cells; ++i)
                    for (int c = 0; c < d.ci; ++c)
                        gb[static_cast<size_t>(c)] += node.grad[i * d.ci + c];
            }
        });
    detail::conv3d_walk(d, [&](size_t in_off, size_t out_off, size_t tap_off) {
        R* xo = out.data() + in_off * d.ci;
        const R* yv = y.data() + out_off * d.co;
        const R* wt = w.data() + tap_off * d.ci * d.co;
        for (int c = 0; c < d.ci; ++c) {
            const R* wr = wt + static_cast<size_t>(c) * d.co;
            R acc = R(0);
            for (int o = 0; o < d.co; ++o) acc += wr[o] * yv[o];
            xo[c] += acc;
        }
    });
    if (bias.defined()) {
        size_t cells = out.numel() / ci;
        for (size_t i = 0; i < cells; ++i)
            for (int c = 0; c < ci; ++c)
                out.values()[i * ci + c] += bias.values()[static_cast<size_t>(c)];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Multi-head scaled dot-product attention. q, k, v: [B, T, D] with D
// divisible by num_heads; full bidirectional attention within each batch row.
template <typename R>
Tensor<R> attention(Tensor<R> q, Tensor<R> k, Tensor<R> v, int num_heads) {
    detail::require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3,
                    "attention: inputs must be [B,T,D]");
    detail::require(q.shape() == k.shape() && q.shape() == v.shape(),
                    str("attention: mismatched shapes ", shape_str(q.shape()), " ",
                        shape_str(k.shape()), " ", shape_str(v.shape())));
    int b = q.dim(0), t = q.dim(1), dm = q.dim(2);
    detail::require(num_heads >= 1 && dm % num_heads == 0,
                    str("attention: width ", dm, " not divisible by heads ", num_heads));
    int dh = dm / num_heads;
    R alpha = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh)));

    // Cached softmax probabilities, [B*heads, T, T].
    auto probs = std::make_shared<std::vector<R>>(
        static_cast<size_t>(b) * num_heads * t * t);

    using StridedMap = Eigen::Map<const MatRM<R>, 0, Eigen::OuterStride<>>;
    using StridedMapMut = Eigen::Map<MatRM<R>, 0, Eigen::OuterStride<>>;
    auto head_view = [t, dm, dh](const R* base, int bi, int h) {
        return StridedMap(base + static_cast<size_t>(bi) * t * dm + static_cast<size_t>(h) * dh,
                          t, dh, Eigen::OuterStride<>(dm));
    };
    auto head_view_mut = [t, dm, dh](R* base, int bi, int h) {
        return StridedMapMut(base + static_cast<size_t>(bi) * t * dm + static_cast<size_t>(h) * dh,
                             t, dh, Eigen::OuterStride<>(dm));
    };

    auto out = Tensor<R>::make_op(
        "attention", q.shape(), {q, k, v},
        [q, k, v, probs, b, t, dm, dh, num_heads, alpha, head_view,
         head_view_mut](typename Tensor<R>::Node& node) mutable {
            MatRM<R> dP(t, t), dS(t, t), P(t, t);
            MatRM<R> Qh(t, dh), Kh(t, dh), Vh(t, dh), GOh(t, dh), acc(t, dh);
            for (int bi = 0; bi < b; ++bi) {
                for (int h = 0; h < num_heads; ++h) {
                    P = ConstMatMap<R>(probs->data() +
                                       (static_cast<size_t>(bi) * num_heads + h) * t * t, t, t);
                    GOh = head_view(node.grad.data(), bi, h);
                    if (v.requires_grad()) {
                        acc.noalias() = P.transpose() * GOh;
                        head_view_mut(v.grad().data(), bi, h) += acc;
                    }
                    if (q.requires_grad() || k.requires_grad()) {
                        Vh = head_view(v.data(), bi, h);
                        dP.noalias() = GOh * Vh.transpose();
                        for (int r = 0; r < t; ++r) {
                            R dot = P.row(r).dot(dP.row(r));
                            dS.row(r) = (P.row(r).array() * (dP.row(r).array() - dot)).matrix();
                        }
                        if (q.requires_grad()) {
                            Kh = head_view(k.data(), bi, h);
                            acc.noalias() = alpha * (dS * Kh);
                            head_view_mut(q.grad().data(), bi, h) += acc;
                        }
                        if (k.requires_grad()) {
                            Qh = head_view(q.data(), bi, h);
                            acc.noalias() = alpha * (dS.transpose() * Qh);
                            head_view_mut(k.grad().data(), bi, h) += acc;
                        }
                    }
                }
            }
        });
    MatRM<R> S(t, t), P(t, t);
    MatRM<R> Qh(t, dh), Kh(t, dh), Vh(t, dh), Oh(t, dh);
    for (int bi = 0; bi < b; ++bi) {
        for (int h = 0; h < num_heads; ++h) {
            Qh = head_view(q.data(), bi, h);
            Kh = head_view(k.data(), bi, h);
            Vh = head_view(v.data(), bi, h);
            S.noalias() = alpha * (Qh * Kh.transpose());
            for (int r = 0; r < t; ++r) {
                R mx = S.row(r).maxCoeff();
                P.row(r) = (S.row(r).array() - mx).exp();
                P.row(r) /= P.row(r).sum();
            }
            MatMap<R>(probs->data() + (static_cast<size_t>(bi) * num_heads + h) * t * t, t, t) = P;
            Oh.noalias() = P * Vh;
            head_view_mut(out.data(), bi, h) = Oh;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean cross-entropy over all rows; logits [..., K], one label per row.
template <typename R>
Tensor<R> cross_entropy(Tensor<R> logits, const std::vector<int>& labels) {
    int k = logits.shape().back();
    size_t rows = logits.numel() / static_cast<size_t>(k);
    detail::require(labels.size() == rows,
                    str("cross_entropy: ", labels.size(), " labels for ", rows, " rows"));
    for (int l : labels)
        detail::require(l >= 0 && l < k, str("cross_entropy: label ", l, " out of range"));

    auto probs = std::make_shared<std::vector<R>>(logits.numel());
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    auto out = Tensor<R>::make_op(
        "cross_entropy", {1}, {logits},
        [logits, probs, labels_copy, rows, k](typename Tensor<R>::Node& node) mutable {
            if (!logits.requires_grad()) return;
            R g = node.grad[0] / static_cast<R>(rows);
            auto& gl = logits.grad();
            for (size_t r = 0; r < rows; ++r) {
                const R* p = probs->data() + r * static_cast<size_t>(k);
                R* dst = gl.data() + r * static_cast<size_t>(k);
                int lab = (*labels_copy)[r];
                for (int i = 0; i < k; ++i) dst[i] += g * (p[i] - (i == lab ? R(1) : R(0)));
            }
        });
    double total = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        const R* s = logits.data() + r * static_cast<size_t>(k);
        R* p = probs->data() + r * static_cast<size_t>(k);
        R mx = s[0];
        for (int i = 1; i < k; ++i) mx = std::max(mx, s[i]);
        double acc = 0.0;
        for (int i = 0; i < k; ++i) acc += std::exp(static_cast<double>(s[i] - mx));
        double lse = std::log(acc) + static_cast<double>(mx);
        total += lse - static_cast<double>(s[labels[r]]);
        double inv = 1.0 / acc;
        for (int i = 0; i < k; ++i)
            p[i] = static_cast<R>(std::exp(static_cast<double>(s[i] - mx)) * inv);
    }
    out.values()[0] = static_cast<R>(total / static_cast<double>(rows));
    return out;
}

// Squared error averaged over the elements of non-masked frames (axis 0).
// Masked (context) frames contribute nothing and their gradient is exactly
// zero. If every frame is masked the loss is defined as zero and
// *all_masked is set.
template <typename R>
Tensor<R> masked_frame_mse(Tensor<R> pred, Tensor<R> target, const std::vector<bool>& mask,
                           bool* all_masked = nullptr) {
    detail::require(pred.shape() == target.shape(),
                    str("masked_frame_mse: shape mismatch ", shape_str(pred.shape()), " vs ",
                        shape_str(target.shape())));
    detail::require(static_cast<int>(mask.size()) == pred.dim(0),
                    str("masked_frame_mse: mask length ", mask.size(), " vs frames ",
                        pred.dim(0)));
    int frames = pred.dim(0);
    size_t stride = pred.numel() / static_cast<size_t>(frames);
    size_t active = 0;
    for (bool m : mask)
        if (!m) ++active;
    if (all_masked) *all_masked = (active == 0);
    R inv = active == 0 ? R(0) : R(1) / static_cast<R>(active * stride);

    auto mask_copy = std::make_shared<std::vector<bool>>(mask);
    auto out = Tensor<R>::make_op(
        "masked_frame_mse", {1}, {pred, target},
        [pred, target, mask_copy, frames, stride, inv](typename Tensor<R>::Node& node) mutable {
            R g2 = R(2) * inv * node.grad[0];
            for (int f = 0; f < frames; ++f) {
                if ((*mask_copy)[static_cast<size_t>(f)]) continue;
                size_t off = static_cast<size_t>(f) * stride;
                if (pred.requires_grad()) {
                    auto& gp = pred.grad();
                    for (size_t i = 0; i < stride; ++i)
                        gp[off + i] += g2 * (pred.values()[off + i] - target.values()[off + i]);
                }
                if (target.requires_grad()) {
                    auto& gt = target.grad();
                    for (size_t i = 0; i < stride; ++i)
                        gt[off + i] -= g2 * (pred.values()[off + i] - target.values()[off + i]);
                }
            }
        });
    double acc = 0.0;
    for (int f = 0; f < frames; ++f) {
        if (mask[static_cast<size_t>(f)]) continue;
        size_t off = static_cast<size_t>(f) * stride;
        for (size_t i = 0; i < stride; ++i) {
            double d = static_cast<double>(pred.values()[off + i]) -
                       static_cast<double>(target.values()[off + i]);
            acc += d * d;
        }
    }
    out.values()[0] = static_cast<R>(acc) * inv;
    return out;
}

/// Per-frame selection: out[t] = mask[t] ? a[t] : b[t]. Gradient routes only
// to the selected source, so the replaced frames receive exactly zero.
template <typename R>
Tensor<R> select_frames(Tensor<R> a, Tensor<R> b, const std::vector<bool>& mask) {
    detail::require(a.shape() == b.shape(),
                    str("select_frames: shape mismatch ", shape_str(a.shape()), " vs ",
                        shape_str(b.shape())));
    detail::require(static_cast<int>(mask.size()) == a.dim(0),
                    "select_frames: mask length must equal frame count");
    int frames = a.dim(0);
    size_t stride = a.numel() / static_cast<size_t>(frames);
    auto mask_copy = std::make_shared<std::vector<bool>>(mask);
    auto out = Tensor<R>::make_op(
        "select_frames", a.shape(), {a, b},
        [a, b, mask_copy, frames, stride](typename Tensor<R>::Node& node) mutable {
            for (int f = 0; f < frames; ++f) {
                size_t off = static_cast<size_t>(f) * stride;
                Tensor<R>& src = (*mask_copy)[static_cast<size_t>(f)] ? a : b;
                if (!src.requires_grad()) continue;
                auto& g = src.grad();
                for (size_t i = 0; i < stride; ++i) g[off + i] += node.grad[off + i];
            }
        });
    for (int f = 0; f < frames; ++f) {
        size_t off = static_cast<size_t>(f) * stride;
        const auto& src = mask[static_cast<size_t>(f)] ? a.values() : b.values();
        std::copy(src.begin() + static_cast<long>(off),
                  src.begin() + static_cast<long>(off + stride),
                  out.values().begin() + static_cast<long>(off));
    }
    return out;
}

}  // namespace dome

#endif  // DOME_OPS_HPP
