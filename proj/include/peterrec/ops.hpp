#pragma once

// Differentiable tensor ops. Each op computes its forward value immediately
// and, when the tape is recording and some input requires grad, records a
// backward rule that accumulates into the inputs' grad buffers.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "peterrec/error.hpp"
#include "peterrec/random.hpp"
#include "peterrec/tensor.hpp"

namespace peterrec {

namespace detail {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline MatrixMap as_matrix(std::span<float> values, std::size_t rows, std::size_t cols) {
    return MatrixMap(values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatrixMap as_matrix(std::span<const float> values, std::size_t rows, std::size_t cols) {
    return ConstMatrixMap(values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline bool tracks(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape.enabled()) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

inline void check_finite(const Tensor& out, std::initializer_list<const Tensor*> inputs) {
#ifndef NDEBUG
    auto finite = [](const Tensor& t) {
        for (float v : t.data()) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    };
    for (const Tensor* t : inputs) {
        if (!finite(*t)) {
            return;
        }
    }
    assert(finite(out) && "non-finite output from finite inputs");
#else
    (void)out;
    (void)inputs;
#endif
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::kDimension, std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                        shape_string(b.shape()));
    }
}

inline std::size_t channels(const Tensor& t) { return t.shape().back(); }
inline std::size_t rows(const Tensor& t) { return t.numel() / t.shape().back(); }

template <typename Forward, typename Backward>
Tensor elementwise_unary(Tape& tape, const Tensor& x, Forward forward, Backward backward) {
    Tensor out(x.shape());
    auto xs = x.data();
    auto ys = out.data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        ys[i] = forward(xs[i]);
    }
    check_finite(out, {&x});
    if (tracks(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out, [x, out, backward]() mutable {
            auto gx = x.grad();
            auto gy = out.grad();
            auto xv = x.data();
            auto yv = out.data();
            for (std::size_t i = 0; i < gx.size(); ++i) {
                gx[i] += gy[i] * backward(xv[i], yv[i]);
            }
        });
    }
    return out;
}

} // namespace detail

/// [m x p] * [p x q] -> [m x q].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        fail(ErrorKind::kDimension,
             "matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    }
    const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
    Tensor out(Shape{m, q});
    detail::as_matrix(out.data(), m, q).noalias() =
        detail::as_matrix(a.data(), m, p) * detail::as_matrix(b.data(), p, q);
    detail::check_finite(out, {&a, &b});
    if (detail::tracks(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record(out, [a, b, out, m, p, q]() mutable {
            auto gy = detail::as_matrix(out.grad(), m, q);
            if (a.requires_grad()) {
                detail::as_matrix(a.grad(), m, p).noalias() += gy * detail::as_matrix(b.data(), p, q).transpose();
            }
            if (b.requires_grad()) {
                detail::as_matrix(b.grad(), p, q).noalias() += detail::as_matrix(a.data(), m, p).transpose() * gy;
            }
        });
    }
    return out;
}

/// Position-wise linear map over the channel axis: [..., p] * [p x q] -> [..., q].
/// Leading axes are treated as rows, so this is a 1x1 convolution on [B x n x p].
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w) {
    if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
        fail(ErrorKind::kDimension,
             "linear: incompatible shapes " + shape_string(x.shape()) + " and " + shape_string(w.shape()));
    }
    const std::size_t m = detail::rows(x), p = w.dim(0), q = w.dim(1);
    Shape shape = x.shape();
    shape.back() = q;
    Tensor out(std::move(shape));
    detail::as_matrix(out.data(), m, q).noalias() =
        detail::as_matrix(x.data(), m, p) * detail::as_matrix(w.data(), p, q);
    detail::check_finite(out, {&x, &w});
    if (detail::tracks(tape, {&x, &w})) {
        out.set_requires_grad(true);
        tape.record(out, [x, w, out, m, p, q]() mutable {
            auto gy = detail::as_matrix(out.grad(), m, q);
            if (x.requires_grad()) {
                detail::as_matrix(x.grad(), m, p).noalias() += gy * detail::as_matrix(w.data(), p, q).transpose();
            }
            if (w.requires_grad()) {
                detail::as_matrix(w.grad(), p, q).noalias() += detail::as_matrix(x.data(), m, p).transpose() * gy;
            }
        });
    }
    return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.shape());
    auto av = a.data(), bv = b.data();
    auto yv = out.data();
    for (std::size_t i = 0; i < yv.size(); ++i) {
        yv[i] = av[i] + bv[i];
    }
    detail::check_finite(out, {&a, &b});
    if (detail::tracks(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record(out, [a, b, out]() mutable {
            auto gy = out.grad();
            for (const Tensor* t : {&a, &b}) {
                if (t->requires_grad()) {
                    auto g = t->grad();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        g[i] += gy[i];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    auto av = a.data(), bv = b.data();
    auto yv = out.data();
    for (std::size_t i = 0; i < yv.size(); ++i) {
        yv[i] = av[i] - bv[i];
    }
    detail::check_finite(out, {&a, &b});
    if (detail::tracks(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record(out, [a, b, out]() mutable {
            auto gy = out.grad();
            if (a.requires_grad()) {
                auto g = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
            }
            if (b.requires_grad()) {
                auto g = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    auto av = a.data(), bv = b.data();
    auto yv = out.data();
    for (std::size_t i = 0; i < yv.size(); ++i) {
        yv[i] = av[i] * bv[i];
    }
    detail::check_finite(out, {&a, &b});
    if (detail::tracks(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record(out, [a, b, out]() mutable {
            auto gy = out.grad();
            if (a.requires_grad()) {
                auto g = a.grad();
                auto bv = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * bv[i];
            }
            if (b.requires_grad()) {
                auto g = b.grad();
                auto av = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * av[i];
            }
        });
    }
    return out;
}

inline Tensor scale(Tape& tape, const Tensor& x, float factor) {
    return detail::elementwise_unary(
        tape, x, [factor](float v) { return v * factor; }, [factor](float, float) { return factor; });
}

/// Adds a [q] bias to every row of a [..., q] tensor.
inline Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    const std::size_t q = detail::channels(x);
    if (bias.rank() != 1 || bias.dim(0) != q) {
        fail(ErrorKind::kDimension,
             "add_bias: bias " + shape_string(bias.shape()) + " does not match channels of " + shape_string(x.shape()));
    }
    const std::size_t n = detail::rows(x);
    Tensor out(x.shape());
    auto xv = x.data(), bv = bias.data();
    auto yv = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < q; ++c) {
            yv[r * q + c] = xv[r * q + c] + bv[c];
        }
    }
    detail::check_finite(out, {&x, &bias});
    if (detail::tracks(tape, {&x, &bias})) {
        out.set_requires_grad(true);
        tape.record(out, [x, bias, out, n, q]() mutable {
            auto gy = out.grad();
            if (x.requires_grad()) {
                auto g = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
            }
            if (bias.requires_grad()) {
                auto g = bias.grad();
                for (std::size_t c = 0; c < q; ++c) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < n; ++r) acc += gy[r * q + c];
                    g[c] += static_cast<float>(acc);
                }
            }
        });
    }
    return out;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
    return detail::elementwise_unary(
        tape, x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
    return detail::elementwise_unary(
        tape, x,
        [](float v) {
            const double d = v;
            return static_cast<float>(d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d)));
        },
        [](float, float y) { return y * (1.0f - y); });
}

/// log(1 + exp(x)) without overflow for large |x|.
inline double stable_softplus(double x) noexcept {
    return (x > 0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline Tensor softplus(Tape& tape, const Tensor& x) {
    return detail::elementwise_unary(
        tape, x, [](float v) { return static_cast<float>(stable_softplus(v)); },
        [](float v, float) {
            const double d = v;
            return static_cast<float>(d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d)));
        });
}

/// Gathers rows of a [V x k] table; backward scatter-adds into the table.
inline Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids) {
    require(table.rank() == 2, ErrorKind::kDimension, "embedding_lookup: table must be rank 2");
    require(!ids.empty(), ErrorKind::kDimension, "embedding_lookup: empty id list");
    const std::size_t vocab = table.dim(0), k = table.dim(1);
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            fail(ErrorKind::kVocabulary,
                 "item id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
        }
    }
    Tensor out(Shape{ids.size(), k});
    auto tv = table.data();
    auto yv = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * k), k, yv.begin() + static_cast<std::ptrdiff_t>(i * k));
    }
    if (detail::tracks(tape, {&table})) {
        out.set_requires_grad(true);
        std::vector<std::int32_t> idv(ids.begin(), ids.end());
        tape.record(out, [table, out, idv = std::move(idv), k]() mutable {
            auto g = table.grad();
            auto gy = out.grad();
            for (std::size_t i = 0; i < idv.size(); ++i) {
                float* dst = g.data() + static_cast<std::size_t>(idv[i]) * k;
                const float* src = gy.data() + i * k;
                for (std::size_t c = 0; c < k; ++c) dst[c] += src[c];
            }
        });
    }
    return out;
}

/// Returns x with each listed row replaced by the single row of `source` ([1 x k]).
inline Tensor replace_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> row_indices, const Tensor& source) {
    require(x.rank() == 2, ErrorKind::kDimension, "replace_rows: x must be rank 2");
    const std::size_t k = x.dim(1);
    if (source.numel() != k) {
        fail(ErrorKind::kDimension, "replace_rows: source " + shape_string(source.shape()) + " does not match row width " +
                                        std::to_string(k));
    }
    std::vector<std::uint8_t> replaced(x.dim(0), 0);
    for (auto r : row_indices) {
        require(r < x.dim(0), ErrorKind::kIndex, "replace_rows: row index out of range");
        replaced[r] = 1;
    }
    Tensor out = x.clone();
    out.set_requires_grad(false);
    auto yv = out.data();
    auto sv = source.data();
    for (std::size_t r = 0; r < replaced.size(); ++r) {
        if (replaced[r]) std::copy(sv.begin(), sv.end(), yv.begin() + static_cast<std::ptrdiff_t>(r * k));
    }
    if (detail::tracks(tape, {&x, &source})) {
        out.set_requires_grad(true);
        tape.record(out, [x, source, out, replaced = std::move(replaced), k]() mutable {
            auto gy = out.grad();
            if (x.requires_grad()) {
                auto g = x.grad();
                for (std::size_t r = 0; r < replaced.size(); ++r) {
                    if (replaced[r]) continue;
                    for (std::size_t c = 0; c < k; ++c) g[r * k + c] += gy[r * k + c];
                }
            }
            if (source.requires_grad()) {
                auto g = source.grad();
                for (std::size_t r = 0; r < replaced.size(); ++r) {
                    if (!replaced[r]) continue;
                    for (std::size_t c = 0; c < k; ++c) g[c] += gy[r * k + c];
                }
            }
        });
    }
    return out;
}

/// Normalizes each position over the channel (last) axis, then applies gain and bias.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-8f) {
    const std::size_t k = detail::channels(x);
    if (gain.numel() != k || bias.numel() != k) {
        fail(ErrorKind::kDimension, "layer_norm: gain/bias do not match channels of " + shape_string(x.shape()));
    }
    const std::size_t n = detail::rows(x);
    Tensor out(x.shape());
    std::vector<float> normalized(x.numel());
    std::vector<double> inv_std(n);
    auto xv = x.data(), gv = gain.data(), bv = bias.data();
    auto yv = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        const float* row = xv.data() + r * k;
        double mean = 0.0;
        for (std::size_t c = 0; c < k; ++c) mean += row[c];
        mean /= static_cast<double>(k);
        double var = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            const double d = row[c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(k);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t c = 0; c < k; ++c) {
            const double xhat = (row[c] - mean) * inv;
            normalized[r * k + c] = static_cast<float>(xhat);
            yv[r * k + c] = static_cast<float>(gv[c] * xhat + bv[c]);
        }
    }
    detail::check_finite(out, {&x, &gain, &bias});
    if (detail::tracks(tape, {&x, &gain, &bias})) {
        out.set_requires_grad(true);
        tape.record(out, [x, gain, bias, out, normalized = std::move(normalized), inv_std = std::move(inv_std), n,
                     k]() mutable {
            auto gy = out.grad();
            auto gv = gain.data();
            if (gain.requires_grad() || bias.requires_grad()) {
                std::vector<double> dgain(k, 0.0), dbias(k, 0.0);
                for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t c = 0; c < k; ++c) {
                        dgain[c] += static_cast<double>(gy[r * k + c]) * normalized[r * k + c];
                        dbias[c] += gy[r * k + c];
                    }
                }
                if (gain.requires_grad()) {
                    auto g = gain.grad();
                    for (std::size_t c = 0; c < k; ++c) g[c] += static_cast<float>(dgain[c]);
                }
                if (bias.requires_grad()) {
                    auto g = bias.grad();
                    for (std::size_t c = 0; c < k; ++c) g[c] += static_cast<float>(dbias[c]);
                }
            }
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t r = 0; r < n; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t c = 0; c < k; ++c) {
                        const double d = static_cast<double>(gy[r * k + c]) * gv[c];
                        mean_d += d;
                        mean_dx += d * normalized[r * k + c];
                    }
                    mean_d /= static_cast<double>(k);
                    mean_dx /= static_cast<double>(k);
                    for (std::size_t c = 0; c < k; ++c) {
                        const double d = static_cast<double>(gy[r * k + c]) * gv[c];
                        gx[r * k + c] +=
                            static_cast<float>(inv_std[r] * (d - mean_d - normalized[r * k + c] * mean_dx));
                    }
                }
            }
        });
    }
    return out;
}

/// Offset (in positions) that tap `tap` reads from: output[t] += input[t - offset] * w[tap].
/// Causal: taps cover t-(K-1)d .. t. Non-causal (odd K): taps are centered on t.
inline std::ptrdiff_t conv_tap_offset(std::size_t tap, std::size_t kernel, std::size_t dilation, bool causal) {
    const auto center = causal ? static_cast<std::ptrdiff_t>(kernel - 1) : static_cast<std::ptrdiff_t>(kernel - 1) / 2;
    return (center - static_cast<std::ptrdiff_t>(tap)) * static_cast<std::ptrdiff_t>(dilation);
}

/// Dilated 1D convolution over the position axis.
/// x: [n x k_in] or [B x n x k_in]; weights: [kernel x k_in x k_out]. Zero padding
/// is implicit: causal pads (kernel-1)*dilation on the left only, non-causal pads
/// (kernel-1)*dilation/2 on each side. No bias; see add_bias.
inline Tensor conv1d_dilated(Tape& tape, const Tensor& x, const Tensor& weights, std::size_t dilation, bool causal) {
    require(x.rank() == 2 || x.rank() == 3, ErrorKind::kDimension, "conv1d_dilated: input must be [n x k] or [B x n x k]");
    require(weights.rank() == 3, ErrorKind::kDimension, "conv1d_dilated: weights must be [kernel x k_in x k_out]");
    require(dilation >= 1, ErrorKind::kConfig, "conv1d_dilated: dilation must be >= 1");
    const std::size_t kernel = weights.dim(0), k_in = weights.dim(1), k_out = weights.dim(2);
    if (k_in != detail::channels(x)) {
        fail(ErrorKind::kDimension, "conv1d_dilated: input " + shape_string(x.shape()) + " does not match weights " +
                                        shape_string(weights.shape()));
    }
    require(causal || kernel % 2 == 1, ErrorKind::kConfig, "conv1d_dilated: non-causal convolution needs an odd kernel");
    const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
    const std::size_t n = x.rank() == 3 ? x.dim(1) : x.dim(0);
    const std::size_t total_rows = batch * n;

    Shape out_shape = x.shape();
    out_shape.back() = k_out;
    Tensor out(out_shape);
    auto yv = out.data();
    detail::RowMatrix tap_out(static_cast<Eigen::Index>(total_rows), static_cast<Eigen::Index>(k_out));
    const auto xm = detail::as_matrix(x.data(), total_rows, k_in);

    for (std::size_t tap = 0; tap < kernel; ++tap) {
        const std::ptrdiff_t offset = conv_tap_offset(tap, kernel, dilation, causal);
        if (static_cast<std::size_t>(std::abs(offset)) >= n) continue;
        const auto wm = detail::as_matrix(weights.data().subspan(tap * k_in * k_out, k_in * k_out), k_in, k_out);
        tap_out.noalias() = xm * wm;
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t lo = offset > 0 ? static_cast<std::size_t>(offset) : 0;
            const std::size_t hi = offset < 0 ? n - static_cast<std::size_t>(-offset) : n;
            for (std::size_t t = lo; t < hi; ++t) {
                const float* src = tap_out.data() + (b * n + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) - offset)) * k_out;
                float* dst = yv.data() + (b * n + t) * k_out;
                for (std::size_t c = 0; c < k_out; ++c) dst[c] += src[c];
            }
        }
    }
    detail::check_finite(out, {&x, &weights});
    if (detail::tracks(tape, {&x, &weights})) {
        out.set_requires_grad(true);
        tape.record(out, [x, weights, out, dilation, causal, kernel, k_in, k_out, batch, n, total_rows]() mutable {
            auto gy = out.grad();
            detail::RowMatrix shifted(static_cast<Eigen::Index>(total_rows), static_cast<Eigen::Index>(k_out));
            for (std::size_t tap = 0; tap < kernel; ++tap) {
                const std::ptrdiff_t offset = conv_tap_offset(tap, kernel, dilation, causal);
                if (static_cast<std::size_t>(std::abs(offset)) >= n) continue;
                // shifted[b, s] = gy[b, s + offset] where valid, zero elsewhere
                shifted.setZero();
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t lo = offset > 0 ? static_cast<std::size_t>(offset) : 0;
                    const std::size_t hi = offset < 0 ? n - static_cast<std::size_t>(-offset) : n;
                    for (std::size_t t = lo; t < hi; ++t) {
                        const float* src = gy.data() + (b * n + t) * k_out;
                        float* dst = shifted.data() + (b * n + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) - offset)) * k_out;
                        std::copy_n(src, k_out, dst);
                    }
                }
                if (x.requires_grad()) {
                    const auto wm = detail::as_matrix(weights.data().subspan(tap * k_in * k_out, k_in * k_out), k_in, k_out);
                    detail::as_matrix(x.grad(), total_rows, k_in).noalias() += shifted * wm.transpose();
                }
                if (weights.requires_grad()) {
                    auto gw = weights.grad().subspan(tap * k_in * k_out, k_in * k_out);
                    detail::as_matrix(gw, k_in, k_out).noalias() +=
                        detail::as_matrix(x.data(), total_rows, k_in).transpose() * shifted;
                }
            }
        });
    }
    return out;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        fail(ErrorKind::kDimension, "reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
    }
    Tensor out(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
    if (detail::tracks(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out, [x, out]() mutable {
            auto g = x.grad();
            auto gy = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
        });
    }
    return out;
}

/// Rows of a [N x k] tensor (any rank; leading axes flattened) in the given order.
inline Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> row_indices) {
    require(!row_indices.empty(), ErrorKind::kDimension, "gather_rows: empty row list");
    const std::size_t k = detail::channels(x), n = detail::rows(x);
    for (auto r : row_indices) {
        require(r < n, ErrorKind::kIndex, "gather_rows: row " + std::to_string(r) + " out of range");
    }
    Tensor out(Shape{row_indices.size(), k});
    auto xv = x.data();
    auto yv = out.data();
    for (std::size_t i = 0; i < row_indices.size(); ++i) {
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(row_indices[i] * k), k, yv.begin() + static_cast<std::ptrdiff_t>(i * k));
    }
    if (detail::tracks(tape, {&x})) {
        out.set_requires_grad(true);
        std::vector<std::size_t> rows(row_indices.begin(), row_indices.end());
        tape.record(out, [x, out, rows = std::move(rows), k]() mutable {
            auto g = x.grad();
            auto gy = out.grad();
            for (std::size_t i = 0; i < rows.size(); ++i) {
                for (std::size_t c = 0; c < k; ++c) g[rows[i] * k + c] += gy[i * k + c];
            }
        });
    }
    return out;
}

/// Position `pos` of every sequence in a [B x n x k] tensor -> [B x k].
inline Tensor select_position(Tape& tape, const Tensor& x, std::size_t pos) {
    require(x.rank() == 3, ErrorKind::kDimension, "select_position: input must be [B x n x k]");
    require(pos < x.dim(1), ErrorKind::kIndex, "select_position: position out of range");
    std::vector<std::size_t> rows(x.dim(0));
    for (std::size_t b = 0; b < rows.size(); ++b) rows[b] = b * x.dim(1) + pos;
    return gather_rows(tape, x, rows);
}

/// Rows [begin, end) along the leading axis.
inline Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin, std::size_t end) {
    require(begin < end && end <= x.dim(0), ErrorKind::kIndex, "slice_rows: invalid range");
    const std::size_t stride = x.numel() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = end - begin;
    Tensor out(shape, std::vector<float>(x.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                         x.data().begin() + static_cast<std::ptrdiff_t>(end * stride)));
    if (detail::tracks(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out, [x, out, begin, stride]() mutable {
            auto g = x.grad();
            auto gy = out.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) g[begin * stride + i] += gy[i];
        });
    }
    return out;
}

/// Concatenation along the leading axis; trailing extents must agree.
inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts) {
    require(!parts.empty(), ErrorKind::kDimension, "concat: no inputs");
    Shape shape = parts.front().shape();
    std::size_t leading = 0;
    for (const auto& p : parts) {
        Shape tail_a(p.shape().begin() + 1, p.shape().end()), tail_b(shape.begin() + 1, shape.end());
        if (tail_a != tail_b) {
            fail(ErrorKind::kDimension, "concat: trailing shape mismatch " + shape_string(p.shape()) + " vs " +
                                            shape_string(shape));
        }
        leading += p.dim(0);
    }
    shape[0] = leading;
    std::vector<float> values;
    values.reserve(shape_numel(shape));
    bool any_grad = false;
    for (const auto& p : parts) {
        values.insert(values.end(), p.data().begin(), p.data().end());
        any_grad = any_grad || p.requires_grad();
    }
    Tensor out(shape, std::move(values));
    if (tape.enabled() && any_grad) {
        out.set_requires_grad(true);
        tape.record(out, [parts, out]() mutable {
            auto gy = out.grad();
            std::size_t offset = 0;
            for (auto& p : parts) {
                if (p.requires_grad()) {
                    auto g = p.grad();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[offset + i];
                }
                offset += p.numel();
            }
        });
    }
    return out;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    if (detail::tracks(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out, [x, out]() mutable {
            const float gy = out.grad()[0];
            for (auto& g : x.grad()) g += gy;
        });
    }
    return out;
}

inline Tensor mean(Tape& tape, const Tensor& x) {
    return scale(tape, sum(tape, x), 1.0f / static_cast<float>(x.numel()));
}

/// Sums a [B x n x k] tensor over positions -> [B x k].
inline Tensor sum_positions(Tape& tape, const Tensor& x) {
    require(x.rank() == 3, ErrorKind::kDimension, "sum_positions: input must be [B x n x k]");
    const std::size_t batch = x.dim(0), n = x.dim(1), k = x.dim(2);
    Tensor out(Shape{batch, k});
    auto xv = x.data();
    auto yv = out.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < k; ++c) {
            double acc = 0.0;
            for (std::size_t t = 0; t < n; ++t) acc += xv[(b * n + t) * k + c];
            yv[b * k + c] = static_cast<float>(acc);
        }
    }
    if (detail::tracks(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out, [x, out, batch, n, k]() mutable {
            auto g = x.grad();
            auto gy = out.grad();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t t = 0; t < n; ++t)
                    for (std::size_t c = 0; c < k; ++c) g[(b * n + t) * k + c] += gy[b * k + c];
        });
    }
    return out;
}

/// Row-wise softmax of a [N x C] tensor.
inline Tensor softmax(Tape& tape, const Tensor& x) {
    require(x.rank() == 2, ErrorKind::kDimension, "softmax: input must be [N x C]");
    const std::size_t n = x.dim(0), c = x.dim(1);
    Tensor out(x.shape());
    auto xv = x.data();
    auto yv = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        const float* row = xv.data() + r * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < c; ++j) yv[r * c + j] = static_cast<float>(std::exp(row[j] - mx) / z);
    }
    if (detail::tracks(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out, [x, out, n, c]() mutable {
            auto g = x.grad();
            auto gy = out.grad();
            auto y = out.data();
            for (std::size_t r = 0; r < n; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += static_cast<double>(gy[r * c + j]) * y[r * c + j];
                for (std::size_t j = 0; j < c; ++j)
                    g[r * c + j] += static_cast<float>(y[r * c + j] * (gy[r * c + j] - dot));
            }
        });
    }
    return out;
}

/// Mean over selected rows of -log softmax(logits)[target]. An empty mask
/// selects every row; otherwise rows with mask[r] == 0 are ignored.
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets,
                                    std::span<const std::uint8_t> mask = {}) {
    require(logits.rank() == 2, ErrorKind::kDimension, "softmax_cross_entropy: logits must be [N x C]");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    require(targets.size() == n, ErrorKind::kDimension, "softmax_cross_entropy: one target per row required");
    require(mask.empty() || mask.size() == n, ErrorKind::kDimension, "softmax_cross_entropy: mask length mismatch");
    std::size_t count = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (!mask.empty() && !mask[r]) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c) {
            fail(ErrorKind::kIndex, "softmax_cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                                        std::to_string(c) + ")");
        }
        ++count;
    }
    require(count > 0, ErrorKind::kEmptyBatch, "softmax_cross_entropy: no rows selected by the mask");

    auto xv = logits.data();
    std::vector<double> lse(n, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (!mask.empty() && !mask[r]) continue;
        const float* row = xv.data() + r * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        lse[r] = mx + std::log(z);
        total += lse[r] - row[targets[r]];
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(count)));
    if (detail::tracks(tape, {&logits})) {
        out.set_requires_grad(true);
        std::vector<std::int32_t> tv(targets.begin(), targets.end());
        std::vector<std::uint8_t> mv(mask.begin(), mask.end());
        tape.record(out, [logits, out, tv = std::move(tv), mv = std::move(mv), lse = std::move(lse), n, c, count]() mutable {
            const double scale = out.grad()[0] / static_cast<double>(count);
            auto g = logits.grad();
            auto xv = logits.data();
            for (std::size_t r = 0; r < n; ++r) {
                if (!mv.empty() && !mv[r]) continue;
                for (std::size_t j = 0; j < c; ++j) {
                    double p = std::exp(static_cast<double>(xv[r * c + j]) - lse[r]);
                    if (static_cast<std::int32_t>(j) == tv[r]) p -= 1.0;
                    g[r * c + j] += static_cast<float>(p * scale);
                }
            }
        });
    }
    return out;
}

/// out[i] = x[i, columns[i]] for a [N x C] tensor.
inline Tensor pick(Tape& tape, const Tensor& x, std::span<const std::int32_t> columns) {
    require(x.rank() == 2, ErrorKind::kDimension, "pick: input must be [N x C]");
    const std::size_t n = x.dim(0), c = x.dim(1);
    require(columns.size() == n, ErrorKind::kDimension, "pick: one column per row required");
    Tensor out(Shape{n});
    for (std::size_t r = 0; r < n; ++r) {
        if (columns[r] < 0 || static_cast<std::size_t>(columns[r]) >= c) {
            fail(ErrorKind::kIndex, "pick: column " + std::to_string(columns[r]) + " out of range");
        }
        out.data()[r] = x.data()[r * c + static_cast<std::size_t>(columns[r])];
    }
    if (detail::tracks(tape, {&x})) {
        out.set_requires_grad(true);
        std::vector<std::int32_t> cols(columns.begin(), columns.end());
        tape.record(out, [x, out, cols = std::move(cols), c]() mutable {
            auto g = x.grad();
            auto gy = out.grad();
            for (std::size_t r = 0; r < cols.size(); ++r) g[r * c + static_cast<std::size_t>(cols[r])] += gy[r];
        });
    }
    return out;
}

/// Inverted dropout: zeroes each element with probability `rate`, scales survivors.
inline Tensor dropout(Tape& tape, const Tensor& x, float rate, Rng& rng) {
    require(rate >= 0.0f && rate < 1.0f, ErrorKind::kConfig, "dropout: rate must be in [0, 1)");
    if (rate == 0.0f) return x;
    std::vector<float> keep(x.numel());
    const float survivor_scale = 1.0f / (1.0f - rate);
    for (auto& m : keep) m = rng.bernoulli(rate) ? 0.0f : survivor_scale;
    Tensor mask(x.shape(), std::move(keep));
    return mul(tape, x, mask);
}

} // namespace peterrec
