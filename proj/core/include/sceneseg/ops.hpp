#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <vector>

#include "sceneseg/parallel.hpp"
#include "sceneseg/tensor.hpp"

// Forward and backward kernels for the fixed set of operations the network
// needs: conv2d (stride 1), relu, batch norm, global avg/max pooling, dense,
// sigmoid. No graph or tape; each forward returns a result object that caches
// exactly what its backward needs.

namespace sceneseg::ops {

namespace detail {

template <typename T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// c (m x n) = a (m x k) * b (k x n), row-major buffers. Accumulates when add
/// is set. Reduction order is Eigen's fixed blocked order: deterministic for a
/// given build, independent of the caller's thread partition.
template <typename T>
void gemm(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool add = false) {
    using Map = Eigen::Map<const EigenMat<T>>;
    Map A(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    Map B(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    Eigen::Map<EigenMat<T>> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (add)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

/// c (m x n) = a^T (m x k stored k x m) * b (k x n)
template <typename T>
void gemm_at(size_t m, size_t n, size_t k, const T* a, const T* b, T* c) {
    using Map = Eigen::Map<const EigenMat<T>>;
    Map A(a, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
    Map B(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    Eigen::Map<EigenMat<T>> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    C.noalias() = A.transpose() * B;
}

/// c (m x n) = a (m x k) * b^T (k x n stored n x k)
template <typename T>
void gemm_bt(size_t m, size_t n, size_t k, const T* a, const T* b, T* c) {
    using Map = Eigen::Map<const EigenMat<T>>;
    Map A(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    Map B(b, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
    Eigen::Map<EigenMat<T>> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    C.noalias() = A * B.transpose();
}

/// Unrolls one sample into a (in_c*kh*kw) x (out_h*out_w) patch matrix.
/// Out-of-bounds taps are zero.
template <typename T>
void im2col(const T* sample, size_t in_c, size_t h, size_t w, size_t kh, size_t kw, size_t pad,
            size_t out_h, size_t out_w, T* cols) {
    const size_t col_w = out_h * out_w;
    for (size_t ic = 0; ic < in_c; ++ic) {
        const T* plane = sample + ic * h * w;
        for (size_t r = 0; r < kh; ++r) {
            for (size_t s = 0; s < kw; ++s) {
                T* row = cols + ((ic * kh + r) * kw + s) * col_w;
                for (size_t oh = 0; oh < out_h; ++oh) {
                    const ptrdiff_t ih = static_cast<ptrdiff_t>(oh + r) - static_cast<ptrdiff_t>(pad);
                    T* dst = row + oh * out_w;
                    if (ih < 0 || ih >= static_cast<ptrdiff_t>(h)) {
                        std::fill(dst, dst + out_w, T(0));
                        continue;
                    }
                    // valid ow range: 0 <= ow + s - pad < w
                    const ptrdiff_t shift = static_cast<ptrdiff_t>(s) - static_cast<ptrdiff_t>(pad);
                    const size_t ow_lo =
                        static_cast<size_t>(std::max<ptrdiff_t>(0, -shift));
                    const size_t ow_hi = static_cast<size_t>(std::clamp<ptrdiff_t>(
                        static_cast<ptrdiff_t>(w) - shift, 0, static_cast<ptrdiff_t>(out_w)));
                    std::fill(dst, dst + std::min(ow_lo, out_w), T(0));
                    if (ow_hi > ow_lo)
                        std::memcpy(dst + ow_lo, plane + ih * static_cast<ptrdiff_t>(w) + ow_lo + shift,
                                    (ow_hi - ow_lo) * sizeof(T));
                    if (ow_hi < out_w) std::fill(dst + ow_hi, dst + out_w, T(0));
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one input sample.
template <typename T>
void col2im(const T* cols, size_t in_c, size_t h, size_t w, size_t kh, size_t kw, size_t pad,
            size_t out_h, size_t out_w, T* sample) {
    const size_t col_w = out_h * out_w;
    for (size_t ic = 0; ic < in_c; ++ic) {
        T* plane = sample + ic * h * w;
        for (size_t r = 0; r < kh; ++r) {
            for (size_t s = 0; s < kw; ++s) {
                const T* row = cols + ((ic * kh + r) * kw + s) * col_w;
                for (size_t oh = 0; oh < out_h; ++oh) {
                    const ptrdiff_t ih = static_cast<ptrdiff_t>(oh + r) - static_cast<ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<ptrdiff_t>(h)) continue;
                    const ptrdiff_t shift = static_cast<ptrdiff_t>(s) - static_cast<ptrdiff_t>(pad);
                    const size_t ow_lo = static_cast<size_t>(std::max<ptrdiff_t>(0, -shift));
                    const size_t ow_hi = static_cast<size_t>(std::clamp<ptrdiff_t>(
                        static_cast<ptrdiff_t>(w) - shift, 0, static_cast<ptrdiff_t>(out_w)));
                    const T* src = row + oh * out_w;
                    T* dst = plane + ih * static_cast<ptrdiff_t>(w) + shift;
                    for (size_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow] += src[ow];
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d (stride 1, zero padding, cross-correlation convention)
// ---------------------------------------------------------------------------

template <typename T>
struct ConvShape {
    size_t out_c, in_c, kh, kw, pad, out_h, out_w;
};

template <typename T>
ConvShape<T> conv2d_check(const TensorT<T>& input, const TensorT<T>& weights,
                          const std::vector<T>& bias, size_t padding) {
    if (weights.c() != input.c())
        throw ShapeError(sceneseg::detail::msg("conv2d: input channel dim is ", input.c(),
                                               " but weights expect in_c ", weights.c()));
    if (bias.size() != weights.n())
        throw ShapeError(sceneseg::detail::msg("conv2d: bias length ", bias.size(),
                                               " does not match out_c ", weights.n()));
    const size_t kh = weights.h(), kw = weights.w();
    const ptrdiff_t oh = static_cast<ptrdiff_t>(input.h() + 2 * padding) - static_cast<ptrdiff_t>(kh) + 1;
    const ptrdiff_t ow = static_cast<ptrdiff_t>(input.w() + 2 * padding) - static_cast<ptrdiff_t>(kw) + 1;
    if (oh < 1 || ow < 1)
        throw ShapeError(sceneseg::detail::msg("conv2d: kernel ", kh, "x", kw, " with padding ",
                                               padding, " exceeds input ", input.h(), "x", input.w()));
    return {weights.n(), input.c(), kh, kw, padding, static_cast<size_t>(oh), static_cast<size_t>(ow)};
}

/// Forward only, no gradient caching. Used by eval-mode inference and the
/// finite-difference objective.
template <typename T>
TensorT<T> conv2d_value(const TensorT<T>& input, const TensorT<T>& weights,
                        const std::vector<T>& bias, size_t padding) {
    const auto s = conv2d_check(input, weights, bias, padding);
    TensorT<T> out(input.n(), s.out_c, s.out_h, s.out_w);
    const size_t krows = s.in_c * s.kh * s.kw;
    const size_t ncols = s.out_h * s.out_w;
    parallel_for_blocks(input.n(), [&](size_t b0, size_t b1) {
        std::vector<T> cols(krows * ncols);
        for (size_t b = b0; b < b1; ++b) {
            detail::im2col(input.sample_ptr(b), s.in_c, input.h(), input.w(), s.kh, s.kw, s.pad,
                           s.out_h, s.out_w, cols.data());
            T* dst = out.sample_ptr(b);
            detail::gemm(s.out_c, ncols, krows, weights.data(), cols.data(), dst);
            for (size_t oc = 0; oc < s.out_c; ++oc) {
                T* row = dst + oc * ncols;
                const T bv = bias[oc];
                for (size_t i = 0; i < ncols; ++i) row[i] += bv;
            }
        }
    });
    return out;
}

template <typename T>
struct ConvGrads {
    TensorT<T> input;
    TensorT<T> weights;
    std::vector<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const TensorT<T>& input, const TensorT<T>& weights, size_t padding,
                             const TensorT<T>& grad_out) {
    const auto s = conv2d_check(input, weights, std::vector<T>(weights.n(), T(0)), padding);
    require_shape(grad_out, input.n(), s.out_c, s.out_h, s.out_w, "conv2d backward: grad_out");
    const size_t krows = s.in_c * s.kh * s.kw;
    const size_t ncols = s.out_h * s.out_w;
    const size_t nb = input.n();

    ConvGrads<T> g;
    g.input = TensorT<T>(input.shape());
    g.weights = TensorT<T>(weights.shape());
    g.bias.assign(s.out_c, T(0));

    // Per-sample weight-gradient partials, reduced in sample order below so
    // the result does not depend on the thread partition.
    std::vector<std::vector<T>> dw_partial(nb);
    parallel_for_blocks(nb, [&](size_t b0, size_t b1) {
        std::vector<T> cols(krows * ncols);
        std::vector<T> dcols(krows * ncols);
        for (size_t b = b0; b < b1; ++b) {
            detail::im2col(input.sample_ptr(b), s.in_c, input.h(), input.w(), s.kh, s.kw, s.pad,
                           s.out_h, s.out_w, cols.data());
            const T* gout = grad_out.sample_ptr(b);
            dw_partial[b].assign(s.out_c * krows, T(0));
            detail::gemm_bt(s.out_c, krows, ncols, gout, cols.data(), dw_partial[b].data());
            detail::gemm_at(krows, ncols, s.out_c, weights.data(), gout, dcols.data());
            detail::col2im(dcols.data(), s.in_c, input.h(), input.w(), s.kh, s.kw, s.pad, s.out_h,
                           s.out_w, g.input.sample_ptr(b));
        }
    });
    for (size_t b = 0; b < nb; ++b) {
        const auto& part = dw_partial[b];
        T* dw = g.weights.data();
        for (size_t i = 0; i < part.size(); ++i) dw[i] += part[i];
        const T* gout = grad_out.sample_ptr(b);
        for (size_t oc = 0; oc < s.out_c; ++oc) {
            T acc = T(0);
            const T* row = gout + oc * ncols;
            for (size_t i = 0; i < ncols; ++i) acc += row[i];
            g.bias[oc] += acc;
        }
    }
    return g;
}

template <typename T>
struct ConvResult {
    TensorT<T> output;
    TensorT<T> input;    // saved activations
    TensorT<T> weights;  // saved kernel
    size_t padding = 0;

    ConvGrads<T> backward(const TensorT<T>& grad_out) const {
        return conv2d_backward(input, weights, padding, grad_out);
    }
};

template <typename T>
ConvResult<T> conv2d(const TensorT<T>& input, const TensorT<T>& weights, const std::vector<T>& bias,
                     size_t padding) {
    ConvResult<T> r;
    r.output = conv2d_value(input, weights, bias, padding);
    r.input = input;
    r.weights = weights;
    r.padding = padding;
    return r;
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu_value(const TensorT<T>& input) {
    TensorT<T> out(input.shape());
    const T* x = input.data();
    T* y = out.data();
    for (size_t i = 0, n = input.count(); i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

template <typename T>
struct ReluResult {
    TensorT<T> output;
    TensorT<T> input;

    /// Subgradient at 0 is 0: gradient passes only where input > 0.
    TensorT<T> backward(const TensorT<T>& grad_out) const {
        require_shape(grad_out, input.n(), input.c(), input.h(), input.w(), "relu backward: grad_out");
        TensorT<T> g(input.shape());
        const T* x = input.data();
        const T* go = grad_out.data();
        T* gi = g.data();
        for (size_t i = 0, n = input.count(); i < n; ++i) gi[i] = x[i] > T(0) ? go[i] : T(0);
        return g;
    }
};

template <typename T>
ReluResult<T> relu(const TensorT<T>& input) {
    return {relu_value(input), input};
}

// ---------------------------------------------------------------------------
// sigmoid
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sigmoid_value(const TensorT<T>& input) {
    TensorT<T> out(input.shape());
    const T* x = input.data();
    T* y = out.data();
    for (size_t i = 0, n = input.count(); i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
    return out;
}

template <typename T>
struct SigmoidResult {
    TensorT<T> output;

    TensorT<T> backward(const TensorT<T>& grad_out) const {
        require_shape(grad_out, output.n(), output.c(), output.h(), output.w(),
                      "sigmoid backward: grad_out");
        TensorT<T> g(output.shape());
        const T* s = output.data();
        const T* go = grad_out.data();
        T* gi = g.data();
        for (size_t i = 0, n = output.count(); i < n; ++i) gi[i] = go[i] * s[i] * (T(1) - s[i]);
        return g;
    }
};

template <typename T>
SigmoidResult<T> sigmoid(const TensorT<T>& input) {
    return {sigmoid_value(input)};
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

enum class BnMode { Train, Eval };

/// Running statistics; updated functionally (batchnorm returns a new state).
template <typename T>
struct BnState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    bool initialized = false;

    static BnState zeros(size_t channels) {
        BnState s;
        s.running_mean.assign(channels, T(0));
        s.running_var.assign(channels, T(1));
        return s;
    }
};

template <typename T>
struct BnGrads {
    TensorT<T> input;
    std::vector<T> gamma;
    std::vector<T> beta;
};

template <typename T>
BnGrads<T> batchnorm_backward(const TensorT<T>& xhat, const std::vector<T>& inv_std,
                              const std::vector<T>& gamma, BnMode mode,
                              const TensorT<T>& grad_out) {
    require_shape(grad_out, xhat.n(), xhat.c(), xhat.h(), xhat.w(), "batchnorm backward: grad_out");
    const size_t c = xhat.c();
    const size_t m = xhat.n() * xhat.plane();
    BnGrads<T> g;
    g.input = TensorT<T>(xhat.shape());
    g.gamma.assign(c, T(0));
    g.beta.assign(c, T(0));
    for (size_t ch = 0; ch < c; ++ch) {
        T sum_g = T(0), sum_gx = T(0);
        for (size_t b = 0; b < xhat.n(); ++b) {
            const T* go = grad_out.plane_ptr(b, ch);
            const T* xh = xhat.plane_ptr(b, ch);
            for (size_t i = 0, p = xhat.plane(); i < p; ++i) {
                sum_g += go[i];
                sum_gx += go[i] * xh[i];
            }
        }
        g.beta[ch] = sum_g;
        g.gamma[ch] = sum_gx;
        const T scale = gamma[ch] * inv_std[ch];
        if (mode == BnMode::Train) {
            // full gradient including the batch-statistic terms
            const T inv_m = T(1) / static_cast<T>(m);
            for (size_t b = 0; b < xhat.n(); ++b) {
                const T* go = grad_out.plane_ptr(b, ch);
                const T* xh = xhat.plane_ptr(b, ch);
                T* gi = g.input.plane_ptr(b, ch);
                for (size_t i = 0, p = xhat.plane(); i < p; ++i)
                    gi[i] = scale * (go[i] - inv_m * (sum_g + xh[i] * sum_gx));
            }
        } else {
            for (size_t b = 0; b < xhat.n(); ++b) {
                const T* go = grad_out.plane_ptr(b, ch);
                T* gi = g.input.plane_ptr(b, ch);
                for (size_t i = 0, p = xhat.plane(); i < p; ++i) gi[i] = scale * go[i];
            }
        }
    }
    return g;
}

template <typename T>
struct BnResult {
    TensorT<T> output;
    TensorT<T> xhat;
    std::vector<T> inv_std;  // per channel, from batch stats (train) or running stats (eval)
    std::vector<T> gamma;
    BnMode mode = BnMode::Train;
    BnState<T> updated_stats;

    BnGrads<T> backward(const TensorT<T>& grad_out) const {
        return batchnorm_backward(xhat, inv_std, gamma, mode, grad_out);
    }
};

/// Train mode normalizes with batch statistics over (n, h, w) per channel and
/// returns running stats updated as run <- (1-momentum)*run + momentum*batch.
/// Eval mode normalizes with the provided running stats.
template <typename T>
BnResult<T> batchnorm(const TensorT<T>& input, const std::vector<T>& gamma,
                      const std::vector<T>& beta, const BnState<T>& stats, BnMode mode,
                      T eps = T(1e-5), T momentum = T(0.1)) {
    const size_t c = input.c();
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError(sceneseg::detail::msg("batchnorm: gamma/beta length ", gamma.size(), "/",
                                               beta.size(), " does not match channel dim ", c));
    if (!(eps > T(0))) throw ConfigError("batchnorm: eps must be > 0");
    if (mode == BnMode::Eval && !stats.initialized)
        throw StateError("batchnorm: eval mode requested but running stats were never updated");

    BnResult<T> r;
    r.output = TensorT<T>(input.shape());
    r.xhat = TensorT<T>(input.shape());
    r.inv_std.assign(c, T(0));
    r.gamma = gamma;
    r.mode = mode;
    r.updated_stats = stats;

    const size_t m = input.n() * input.plane();
    for (size_t ch = 0; ch < c; ++ch) {
        T mean, var;
        if (mode == BnMode::Train) {
            T sum = T(0);
            for (size_t b = 0; b < input.n(); ++b) {
                const T* x = input.plane_ptr(b, ch);
                for (size_t i = 0, p = input.plane(); i < p; ++i) sum += x[i];
            }
            mean = sum / static_cast<T>(m);
            T sq = T(0);
            for (size_t b = 0; b < input.n(); ++b) {
                const T* x = input.plane_ptr(b, ch);
                for (size_t i = 0, p = input.plane(); i < p; ++i) {
                    const T d = x[i] - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<T>(m);
            r.updated_stats.running_mean[ch] =
                (T(1) - momentum) * stats.running_mean[ch] + momentum * mean;
            r.updated_stats.running_var[ch] =
                (T(1) - momentum) * stats.running_var[ch] + momentum * var;
        } else {
            mean = stats.running_mean[ch];
            var = stats.running_var[ch];
        }
        const T inv_std = T(1) / std::sqrt(var + eps);
        r.inv_std[ch] = inv_std;
        for (size_t b = 0; b < input.n(); ++b) {
            const T* x = input.plane_ptr(b, ch);
            T* xh = r.xhat.plane_ptr(b, ch);
            T* y = r.output.plane_ptr(b, ch);
            for (size_t i = 0, p = input.plane(); i < p; ++i) {
                xh[i] = (x[i] - mean) * inv_std;
                y[i] = gamma[ch] * xh[i] + beta[ch];
            }
        }
    }
    if (mode == BnMode::Train) r.updated_stats.initialized = true;
    return r;
}

/// Normalized output only, no caches and no stat update.
template <typename T>
TensorT<T> batchnorm_value(const TensorT<T>& input, const std::vector<T>& gamma,
                           const std::vector<T>& beta, const BnState<T>& stats, BnMode mode,
                           T eps = T(1e-5)) {
    if (mode == BnMode::Eval) {
        if (!stats.initialized)
            throw StateError("batchnorm: eval mode requested but running stats were never updated");
        const size_t c = input.c();
        if (gamma.size() != c || beta.size() != c)
            throw ShapeError(sceneseg::detail::msg("batchnorm: gamma/beta length ", gamma.size(),
                                                   "/", beta.size(),
                                                   " does not match channel dim ", c));
        TensorT<T> out(input.shape());
        for (size_t ch = 0; ch < c; ++ch) {
            const T inv_std = T(1) / std::sqrt(stats.running_var[ch] + eps);
            const T mean = stats.running_mean[ch];
            for (size_t b = 0; b < input.n(); ++b) {
                const T* x = input.plane_ptr(b, ch);
                T* y = out.plane_ptr(b, ch);
                for (size_t i = 0, p = input.plane(); i < p; ++i)
                    y[i] = gamma[ch] * (x[i] - mean) * inv_std + beta[ch];
            }
        }
        return out;
    }
    return batchnorm(input, gamma, beta, stats, mode, eps).output;
}

// ---------------------------------------------------------------------------
// global pooling
// ---------------------------------------------------------------------------

enum class PoolKind { Avg, Max };

template <typename T>
struct PoolResult {
    TensorT<T> output;  // (n, c, 1, 1)
    PoolKind kind = PoolKind::Avg;
    std::array<size_t, 4> in_shape{};
    std::vector<uint32_t> argmax;  // flat plane index per (n, c); max pooling only

    TensorT<T> backward(const TensorT<T>& grad_out) const {
        require_shape(grad_out, in_shape[0], in_shape[1], 1, 1, "global_pool backward: grad_out");
        TensorT<T> g(in_shape);
        const size_t plane = in_shape[2] * in_shape[3];
        for (size_t b = 0; b < in_shape[0]; ++b) {
            for (size_t ch = 0; ch < in_shape[1]; ++ch) {
                const T go = grad_out.at(b, ch, 0, 0);
                T* gp = g.plane_ptr(b, ch);
                if (kind == PoolKind::Avg) {
                    const T v = go / static_cast<T>(plane);
                    for (size_t i = 0; i < plane; ++i) gp[i] = v;
                } else {
                    gp[argmax[b * in_shape[1] + ch]] = go;
                }
            }
        }
        return g;
    }
};

/// Pools each (h, w) plane to a single value. Max pooling records the first
/// (row-major) maximum position and routes the whole gradient there.
template <typename T>
PoolResult<T> global_pool(const TensorT<T>& input, PoolKind kind) {
    if (input.plane() == 0) throw ShapeError("global_pool: empty spatial plane");
    PoolResult<T> r;
    r.kind = kind;
    r.in_shape = input.shape();
    r.output = TensorT<T>(input.n(), input.c(), 1, 1);
    if (kind == PoolKind::Max) r.argmax.assign(input.n() * input.c(), 0);
    const size_t plane = input.plane();
    for (size_t b = 0; b < input.n(); ++b) {
        for (size_t ch = 0; ch < input.c(); ++ch) {
            const T* x = input.plane_ptr(b, ch);
            if (kind == PoolKind::Avg) {
                T sum = T(0);
                for (size_t i = 0; i < plane; ++i) sum += x[i];
                r.output.at(b, ch, 0, 0) = sum / static_cast<T>(plane);
            } else {
                size_t best = 0;
                T bv = x[0];
                for (size_t i = 1; i < plane; ++i)
                    if (x[i] > bv) {
                        bv = x[i];
                        best = i;
                    }
                r.output.at(b, ch, 0, 0) = bv;
                r.argmax[b * input.c() + ch] = static_cast<uint32_t>(best);
            }
        }
    }
    return r;
}

template <typename T>
TensorT<T> global_pool_value(const TensorT<T>& input, PoolKind kind) {
    return global_pool(input, kind).output;
}

// ---------------------------------------------------------------------------
// dense (affine map, applied per sample)
// ---------------------------------------------------------------------------

template <typename T>
struct DenseGrads {
    TensorT<T> input;
    TensorT<T> weights;
    std::vector<T> bias;
};

template <typename T>
struct DenseResult {
    TensorT<T> output;  // (n, c_out, 1, 1)
    TensorT<T> input;   // (n, c_in, 1, 1)
    TensorT<T> weights;

    DenseGrads<T> backward(const TensorT<T>& grad_out) const {
        const size_t c_out = weights.n(), c_in = weights.c(), nb = input.n();
        require_shape(grad_out, nb, c_out, 1, 1, "dense backward: grad_out");
        DenseGrads<T> g;
        g.input = TensorT<T>(input.shape());
        g.weights = TensorT<T>(weights.shape());
        g.bias.assign(c_out, T(0));
        // dX = G * W, dW = G^T * X
        detail::gemm(nb, c_in, c_out, grad_out.data(), weights.data(), g.input.data());
        detail::gemm_at(c_out, c_in, nb, grad_out.data(), input.data(), g.weights.data());
        for (size_t b = 0; b < nb; ++b)
            for (size_t o = 0; o < c_out; ++o) g.bias[o] += grad_out.at(b, o, 0, 0);
        return g;
    }
};

/// y = W x + b for each sample row. Input (n, c_in, 1, 1), weights
/// (c_out, c_in, 1, 1), output (n, c_out, 1, 1).
template <typename T>
TensorT<T> dense_value(const TensorT<T>& input, const TensorT<T>& weights,
                       const std::vector<T>& bias) {
    const size_t c_out = weights.n(), c_in = weights.c();
    if (input.c() != c_in)
        throw ShapeError(sceneseg::detail::msg("dense: input feature dim is ", input.c(),
                                               " but weights expect ", c_in));
    if (bias.size() != c_out)
        throw ShapeError(sceneseg::detail::msg("dense: bias length ", bias.size(),
                                               " does not match c_out ", c_out));
    TensorT<T> out(input.n(), c_out, 1, 1);
    // X (n x c_in) * W^T (c_in x c_out)
    detail::gemm_bt(input.n(), c_out, c_in, input.data(), weights.data(), out.data());
    for (size_t b = 0; b < input.n(); ++b)
        for (size_t o = 0; o < c_out; ++o) out.at(b, o, 0, 0) += bias[o];
    return out;
}

template <typename T>
DenseResult<T> dense(const TensorT<T>& input, const TensorT<T>& weights, const std::vector<T>& bias) {
    return {dense_value(input, weights, bias), input, weights};
}

}  // namespace sceneseg::ops
