#pragma once
// Differentiable tensor operations. All ops are value-semantic: inputs are
// never mutated, outputs are fresh tensors.

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "depthprune/tensor.hpp"

namespace depthprune {

namespace detail {

enum class Broadcast { Same, RightRepeats, LeftRepeats };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::Same;
    if (is_suffix(a.shape(), b.shape())) return Broadcast::RightRepeats;
    if (is_suffix(b.shape(), a.shape())) return Broadcast::LeftRepeats;
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not trailing-broadcast compatible");
}

// Applies fn(x, y) over a (big) and b (trailing-broadcast small).
template <class Fn>
Tensor zip_broadcast(const Tensor& big, const Tensor& small, Fn fn) {
    Tensor out = Tensor::zeros(big.shape());
    const auto x = big.data();
    const auto y = small.data();
    auto o = out.data();
    const std::size_t n = small.numel();
    for (std::size_t i = 0; i < x.size(); ++i) o[i] = fn(x[i], y[i % n]);
    return out;
}

inline void accumulate(const Tensor& t, std::span<const double> g) {
    auto tg = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i) tg[i] += g[i];
}

// Accumulates g (shaped like big) into small by summing over repeats.
inline void accumulate_reduced(const Tensor& small, std::span<const double> g) {
    auto sg = small.grad();
    const std::size_t n = small.numel();
    for (std::size_t i = 0; i < g.size(); ++i) sg[i % n] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "add");
    const Tensor& big = kind == detail::Broadcast::LeftRepeats ? b : a;
    const Tensor& small = kind == detail::Broadcast::LeftRepeats ? a : b;
    Tensor out = detail::zip_broadcast(big, small, [](double x, double y) { return x + y; });
    if (detail::wants_grad({&a, &b})) {
        detail::record(out, [out, big, small]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            if (big.requires_grad()) detail::accumulate(big, g);
            if (small.requires_grad()) detail::accumulate_reduced(small, g);
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("sub: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    Tensor out = detail::zip_broadcast(a, b, [](double x, double y) { return x - y; });
    if (detail::wants_grad({&a, &b})) {
        detail::record(out, [out, a, b]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            if (a.requires_grad()) detail::accumulate(a, g);
            if (b.requires_grad()) {
                auto bg = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) bg[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "mul");
    const Tensor& big = kind == detail::Broadcast::LeftRepeats ? b : a;
    const Tensor& small = kind == detail::Broadcast::LeftRepeats ? a : b;
    Tensor out = detail::zip_broadcast(big, small, [](double x, double y) { return x * y; });
    if (detail::wants_grad({&a, &b})) {
        detail::record(out, [out, big, small]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            const auto x = big.data();
            const auto y = small.data();
            const std::size_t n = small.numel();
            if (big.requires_grad()) {
                auto bg = big.grad();
                for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * y[i % n];
            }
            if (small.requires_grad()) {
                auto sg = small.grad();
                for (std::size_t i = 0; i < g.size(); ++i) sg[i % n] += g[i] * x[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const auto x = a.data();
    auto o = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) o[i] = s * x[i];
    if (detail::wants_grad({&a})) {
        detail::record(out, [out, a, s]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            auto ag = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ag[i] += s * g[i];
        });
    }
    return out;
}

namespace detail {

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
    Tensor out = Tensor::zeros(a.shape());
    const auto x = a.data();
    auto o = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(x[i]);
    if (wants_grad({&a})) {
        record(out, [out, a, df]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            const auto xv = a.data();
            const auto yv = out.data();
            auto ag = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * df(xv[i], yv[i]);
        });
    }
    return out;
}

}  // namespace detail

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    for (double v : a.data())
        if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (detail::wants_grad({&a})) {
        detail::record(out, [out, a]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            for (auto& v : a.grad()) v += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Mean over one axis; the axis is removed from the output shape.
inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw DimensionError("mean_axis: axis out of range");
    const auto& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];
    Shape os;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) os.push_back(s[i]);
    if (os.empty()) os.push_back(1);
    Tensor out = Tensor::zeros(os);
    const auto x = a.data();
    auto o = out.data();
    const double inv = 1.0 / static_cast<double>(len);
    for (std::size_t p = 0; p < outer; ++p)
        for (std::size_t k = 0; k < len; ++k)
            for (std::size_t q = 0; q < inner; ++q) o[p * inner + q] += x[(p * len + k) * inner + q] * inv;
    if (detail::wants_grad({&a})) {
        detail::record(out, [out, a, outer, inner, len, inv]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            auto ag = a.grad();
            for (std::size_t p = 0; p < outer; ++p)
                for (std::size_t k = 0; k < len; ++k)
                    for (std::size_t q = 0; q < inner; ++q) ag[(p * len + k) * inner + q] += g[p * inner + q] * inv;
        });
    }
    return out;
}

/// Mean squared error between two same-shaped tensors (scalar result).
inline Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mse: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    const auto x = a.data();
    const auto y = b.data();
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    const double n = static_cast<double>(x.size());
    Tensor out = Tensor::scalar(s / n);
    if (detail::wants_grad({&a, &b})) {
        detail::record(out, [out, a, b, n]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0] * 2.0 / n;
            const auto xv = a.data();
            const auto yv = b.data();
            if (a.requires_grad()) {
                auto ag = a.grad();
                for (std::size_t i = 0; i < xv.size(); ++i) ag[i] += g * (xv[i] - yv[i]);
            }
            if (b.requires_grad()) {
                auto bg = b.grad();
                for (std::size_t i = 0; i < xv.size(); ++i) bg[i] -= g * (xv[i] - yv[i]);
            }
        });
    }
    return out;
}

/// MSE restricted to positions where keep[i] is true; zero if nothing is kept.
inline Tensor masked_mse(const Tensor& a, const Tensor& b, const std::vector<bool>& keep) {
    if (a.shape() != b.shape())
        throw DimensionError("masked_mse: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    if (keep.size() != a.numel()) throw DimensionError("masked_mse: mask length mismatch");
    const auto x = a.data();
    const auto y = b.data();
    double s = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!keep[i]) continue;
        const double d = x[i] - y[i];
        s += d * d;
        ++count;
    }
    const double n = static_cast<double>(count);
    Tensor out = Tensor::scalar(count ? s / n : 0.0);
    if (count && detail::wants_grad({&a, &b})) {
        detail::record(out, [out, a, b, n, keep]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0] * 2.0 / n;
            const auto xv = a.data();
            const auto yv = b.data();
            for (std::size_t i = 0; i < xv.size(); ++i) {
                if (!keep[i]) continue;
                if (a.requires_grad()) a.grad()[i] += g * (xv[i] - yv[i]);
                if (b.requires_grad()) b.grad()[i] -= g * (xv[i] - yv[i]);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// C[m,n] = A[m,k] B[k,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    detail::mat(out.data().data(), m, n).noalias() =
        detail::cmat(a.data().data(), m, k) * detail::cmat(b.data().data(), k, n);
    if (detail::wants_grad({&a, &b})) {
        detail::record(out, [out, a, b, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const auto g = detail::cmat(out.grad().data(), m, n);
            if (a.requires_grad())
                detail::mat(a.grad().data(), m, k).noalias() += g * detail::cmat(b.data().data(), k, n).transpose();
            if (b.requires_grad())
                detail::mat(b.grad().data(), k, n).noalias() += detail::cmat(a.data().data(), m, k).transpose() * g;
        });
    }
    return out;
}

/// y = x W^T + bias, with x viewed as [rows, in]; W is [out, in]. Leading dims of x are kept.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
    if (w.rank() != 2 || x.shape().back() != w.dim(1))
        throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                             shape_str(w.shape()));
    const std::size_t in = w.dim(1), outf = w.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf))
        throw DimensionError("linear: bias shape " + shape_str(bias.shape()));
    const std::size_t rows = x.numel() / in;
    Shape os = x.shape();
    os.back() = outf;
    Tensor out = Tensor::zeros(os);
    auto o = detail::mat(out.data().data(), rows, outf);
    o.noalias() = detail::cmat(x.data().data(), rows, in) * detail::cmat(w.data().data(), outf, in).transpose();
    if (bias.defined()) o.rowwise() += detail::cmat(bias.data().data(), 1, outf).row(0);
    if (detail::wants_grad({&x, &w, &bias})) {
        detail::record(out, [out, x, w, bias, rows, in, outf]() mutable {
            if (!out.has_grad()) return;
            const auto g = detail::cmat(out.grad().data(), rows, outf);
            if (x.requires_grad())
                detail::mat(x.grad().data(), rows, in).noalias() += g * detail::cmat(w.data().data(), outf, in);
            if (w.requires_grad())
                detail::mat(w.grad().data(), outf, in).noalias() += g.transpose() * detail::cmat(x.data().data(), rows, in);
            if (bias.defined() && bias.requires_grad())
                detail::mat(bias.grad().data(), 1, outf) += g.colwise().sum();
        });
    }
    return out;
}

/// Batched product: a[B,m,k] b[B,k,n] -> [B,m,n]; with transpose_b, b is [B,n,k].
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw DimensionError("bmm: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    if ((transpose_b ? b.dim(2) : b.dim(1)) != k)
        throw DimensionError("bmm: inner dimensions differ for " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({batch, m, n});
    for (std::size_t i = 0; i < batch; ++i) {
        auto A = detail::cmat(a.data().data() + i * m * k, m, k);
        auto o = detail::mat(out.data().data() + i * m * n, m, n);
        if (transpose_b)
            o.noalias() = A * detail::cmat(b.data().data() + i * n * k, n, k).transpose();
        else
            o.noalias() = A * detail::cmat(b.data().data() + i * k * n, k, n);
    }
    if (detail::wants_grad({&a, &b})) {
        detail::record(out, [out, a, b, batch, m, k, n, transpose_b]() mutable {
            if (!out.has_grad()) return;
            for (std::size_t i = 0; i < batch; ++i) {
                const auto g = detail::cmat(out.grad().data() + i * m * n, m, n);
                const auto A = detail::cmat(a.data().data() + i * m * k, m, k);
                if (transpose_b) {
                    const auto Bt = detail::cmat(b.data().data() + i * n * k, n, k);
                    if (a.requires_grad()) detail::mat(a.grad().data() + i * m * k, m, k).noalias() += g * Bt;
                    if (b.requires_grad())
                        detail::mat(b.grad().data() + i * n * k, n, k).noalias() += g.transpose() * A;
                } else {
                    const auto B = detail::cmat(b.data().data() + i * k * n, k, n);
                    if (a.requires_grad())
                        detail::mat(a.grad().data() + i * m * k, m, k).noalias() += g * B.transpose();
                    if (b.requires_grad())
                        detail::mat(b.grad().data() + i * k * n, k, n).noalias() += A.transpose() * g;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Tensor out = Tensor::from(std::move(shape), a.values());
    if (detail::wants_grad({&a})) {
        detail::record(out, [out, a]() mutable {
            if (!out.has_grad()) return;
            detail::accumulate(a, out.grad());
        });
    }
    return out;
}

/// General axis permutation: out.shape[i] = a.shape[perm[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
    const std::size_t r = a.rank();
    if (perm.size() != r) throw DimensionError("permute: rank mismatch");
    std::vector<bool> seen(r, false);
    for (auto p : perm) {
        if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation");
        seen[p] = true;
    }
    const auto& s = a.shape();
    Shape os(r);
    for (std::size_t i = 0; i < r; ++i) os[i] = s[perm[i]];
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
    // map: output linear index -> input linear index
    std::vector<std::size_t> index(a.numel());
    std::vector<std::size_t> coord(r, 0);
    for (std::size_t lin = 0; lin < index.size(); ++lin) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) src += coord[i] * in_stride[perm[i]];
        index[lin] = src;
        for (std::size_t i = r; i-- > 0;) {
            if (++coord[i] < os[i]) break;
            coord[i] = 0;
        }
    }
    Tensor out = Tensor::zeros(os);
    const auto x = a.data();
    auto o = out.data();
    for (std::size_t i = 0; i < index.size(); ++i) o[i] = x[index[i]];
    if (detail::wants_grad({&a})) {
        detail::record(out, [out, a, index = std::move(index)]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            auto ag = a.grad();
            for (std::size_t i = 0; i < index.size(); ++i) ag[index[i]] += g[i];
        });
    }
    return out;
}

/// Rows of table[R, d] selected by indices -> [n, d]; gradient scatters back.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices) {
    if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
    const std::size_t rows = table.dim(0), d = table.dim(1);
    for (auto i : indices)
        if (i >= rows) throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range");
    Tensor out = Tensor::zeros({indices.size(), d});
    auto o = out.data();
    const auto t = table.data();
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(indices[r] * d), d, o.begin() + static_cast<std::ptrdiff_t>(r * d));
    if (detail::wants_grad({&table})) {
        detail::record(out, [out, table, indices, d]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            auto tg = table.grad();
            for (std::size_t r = 0; r < indices.size(); ++r)
                for (std::size_t j = 0; j < d; ++j) tg[indices[r] * d + j] += g[r * d + j];
        });
    }
    return out;
}

/// Single element as a [1] tensor.
inline Tensor select(const Tensor& a, std::size_t i) {
    if (i >= a.numel()) throw DimensionError("select: index out of range");
    Tensor out = Tensor::scalar(a.data()[i]);
    if (detail::wants_grad({&a})) {
        detail::record(out, [out, a, i]() mutable {
            if (!out.has_grad()) return;
            a.grad()[i] += out.grad()[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Numerically stabilized softmax along `axis`.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw DimensionError("softmax: axis out of range");
    const auto& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];
    Tensor out = Tensor::zeros(s);
    const auto x = a.data();
    auto y = out.data();
    for (std::size_t p = 0; p < outer; ++p) {
        for (std::size_t q = 0; q < inner; ++q) {
            const std::size_t base = p * len * inner + q;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                const double e = std::exp(x[base + k * inner] - mx);
                y[base + k * inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < len; ++k) y[base + k * inner] /= z;
        }
    }
    if (detail::wants_grad({&a})) {
        detail::record(out, [out, a, outer, inner, len]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            const auto yv = out.data();
            auto ag = a.grad();
            for (std::size_t p = 0; p < outer; ++p) {
                for (std::size_t q = 0; q < inner; ++q) {
                    const std::size_t base = p * len * inner + q;
                    double dot = 0.0;
                    for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * yv[base + k * inner];
                    for (std::size_t k = 0; k < len; ++k)
                        ag[base + k * inner] += yv[base + k * inner] * (g[base + k * inner] - dot);
                }
            }
        });
    }
    return out;
}

/// log(softmax(x)) over the last axis, computed without forming the softmax first.
inline Tensor log_softmax(const Tensor& a) {
    const std::size_t len = a.shape().back();
    const std::size_t rows = a.numel() / len;
    Tensor out = Tensor::zeros(a.shape());
    const auto x = a.data();
    auto y = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * len;
        const double mx = *std::max_element(xr, xr + len);
        double z = 0.0;
        for (std::size_t k = 0; k < len; ++k) z += std::exp(xr[k] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t k = 0; k < len; ++k) y[r * len + k] = xr[k] - lse;
    }
    if (detail::wants_grad({&a})) {
        detail::record(out, [out, a, rows, len]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            const auto yv = out.data();
            auto ag = a.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                double gs = 0.0;
                for (std::size_t k = 0; k < len; ++k) gs += g[r * len + k];
                for (std::size_t k = 0; k < len; ++k) ag[r * len + k] += g[r * len + k] - std::exp(yv[r * len + k]) * gs;
            }
        });
    }
    return out;
}

/// Layer normalization over the last dimension followed by a per-feature affine map.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if (!(eps > 0.0)) throw DomainError("layernorm: eps must be positive");
    const std::size_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d) throw DimensionError("layernorm: affine parameters must have length " + std::to_string(d));
    const std::size_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    const auto xv = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();
    auto y = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mu) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = gv[j] * h + bv[j];
        }
    }
    if (detail::wants_grad({&x, &gain, &bias})) {
        detail::record(out, [out, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            const auto gv = gain.data();
            if (gain.requires_grad()) {
                auto gg = gain.grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
            }
            if (bias.requires_grad()) {
                auto bg = bias.grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) bg[j] += g[r * d + j];
            }
            if (x.requires_grad()) {
                auto xg = x.grad();
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gv[j];
                        m1 += dh;
                        m2 += dh * xhat[r * d + j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gv[j];
                        xg[r * d + j] += inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pruning-specific ops

/// Forward value `hard`, gradient passed unchanged to `soft` (straight-through estimator).
inline Tensor straight_through(const std::vector<double>& hard, const Tensor& soft) {
    if (hard.size() != soft.numel()) throw DimensionError("straight_through: size mismatch");
    Tensor out = Tensor::from(soft.shape(), hard);
    if (detail::wants_grad({&soft})) {
        detail::record(out, [out, soft]() mutable {
            if (!out.has_grad()) return;
            detail::accumulate(soft, out.grad());
        });
    }
    return out;
}

/// Layer gate: out = m * branch + (1 - m) * skip, with m a [1] tensor.
///
/// The gradient reaching `branch` is `branch_grad_scale * dout`. Passing the
/// forward gate value reproduces ordinary autodiff; other values let a closed
/// gate still deliver a learning signal to its layer.
inline Tensor gate(const Tensor& branch, const Tensor& skip, const Tensor& m, double branch_grad_scale) {
    if (branch.shape() != skip.shape()) throw DimensionError("gate: branch and skip shapes differ");
    if (m.numel() != 1) throw DimensionError("gate: gate value must be a scalar");
    const double mv = m.item();
    Tensor out = Tensor::zeros(skip.shape());
    const auto b = branch.data();
    const auto s = skip.data();
    auto o = out.data();
    if (mv == 0.0) std::copy(s.begin(), s.end(), o.begin());
    else if (mv == 1.0) std::copy(b.begin(), b.end(), o.begin());
    else
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = mv * b[i] + (1.0 - mv) * s[i];
    if (detail::wants_grad({&branch, &skip, &m})) {
        detail::record(out, [out, branch, skip, m, mv, branch_grad_scale]() mutable {
            if (!out.has_grad()) return;
            const auto g = out.grad();
            const auto bv = branch.data();
            const auto sv = skip.data();
            if (branch.requires_grad()) {
                auto bg = branch.grad();
                for (std::size_t i = 0; i < g.size(); ++i) bg[i] += branch_grad_scale * g[i];
            }
            if (skip.requires_grad() && mv != 1.0) {
                auto sg = skip.grad();
                for (std::size_t i = 0; i < g.size(); ++i) sg[i] += (1.0 - mv) * g[i];
            }
            if (m.requires_grad()) {
                double dm = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) dm += g[i] * (bv[i] - sv[i]);
                m.grad()[0] += dm;
            }
        });
    }
    return out;
}

}  // namespace depthprune
