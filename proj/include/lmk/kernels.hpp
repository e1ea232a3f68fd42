#pragma once

// Scalar-generic loop kernels over contiguous row-major buffers.
//
// The Tensor-level ops (float) and the gradient tape (float or double) share these,
// so a tape replay at float reproduces inference bit-for-bit. Every output element
// is accumulated in a fixed order independent of how callers schedule the work.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace lmk::kernels {

struct ConvGeometry {
    std::size_t c_in = 1, h = 1, w = 1;
    std::size_t c_out = 1, kh = 1, kw = 1;
    std::size_t stride_h = 1, stride_w = 1;
    std::size_t pad_h = 0, pad_w = 0;
    std::size_t groups = 1;

    std::size_t out_h() const { return (h + 2 * pad_h - kh) / stride_h + 1; }
    std::size_t out_w() const { return (w + 2 * pad_w - kw) / stride_w + 1; }
    std::size_t in_per_group() const { return c_in / groups; }
    std::size_t out_per_group() const { return c_out / groups; }
    std::size_t weight_numel() const { return c_out * in_per_group() * kh * kw; }
};

namespace detail {

// Output columns ox for which ox*stride + k - pad lands inside [0, extent).
inline void valid_range(std::size_t k, std::size_t pad, std::size_t stride, std::size_t extent,
                        std::size_t out, std::size_t& lo, std::size_t& hi) {
    const long kk = static_cast<long>(k) - static_cast<long>(pad);
    const long s = static_cast<long>(stride);
    long first = kk >= 0 ? 0 : (-kk + s - 1) / s;
    long last = (static_cast<long>(extent) - 1 - kk);
    last = last < 0 ? -1 : last / s;
    lo = static_cast<std::size_t>(std::max(first, 0L));
    hi = static_cast<std::size_t>(std::min(last + 1, static_cast<long>(out)));
    if (hi < lo) hi = lo;
}

} // namespace detail

/// Cross-correlation. out is overwritten. Per output element the sum runs over
/// (input channel, ky, kx) ascending; bias is added last.
template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const std::size_t cig = g.in_per_group(), cog = g.out_per_group();
    std::fill(out.begin(), out.end(), T(0));
    for (std::size_t oc = 0; oc < g.c_out; ++oc) {
        T* plane = out.data() + oc * oh * ow;
        const std::size_t grp = oc / cog;
        for (std::size_t icg = 0; icg < cig; ++icg) {
            const std::size_t ic = grp * cig + icg;
            const T* src = in.data() + ic * g.h * g.w;
            const T* wk = weight.data() + ((oc * cig + icg) * g.kh) * g.kw;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                std::size_t y0, y1;
                detail::valid_range(ky, g.pad_h, g.stride_h, g.h, oh, y0, y1);
                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                    const T wv = wk[ky * g.kw + kx];
                    std::size_t x0, x1;
                    detail::valid_range(kx, g.pad_w, g.stride_w, g.w, ow, x0, x1);
                    for (std::size_t oy = y0; oy < y1; ++oy) {
                        const std::size_t iy = oy * g.stride_h + ky - g.pad_h;
                        const T* row = src + iy * g.w;
                        T* dst = plane + oy * ow;
                        if (g.stride_w == 1) {
                            const T* shifted = row + (x0 + kx - g.pad_w);
                            for (std::size_t ox = x0; ox < x1; ++ox) dst[ox] += wv * shifted[ox - x0];
                        } else {
                            for (std::size_t ox = x0; ox < x1; ++ox)
                                dst[ox] += wv * row[ox * g.stride_w + kx - g.pad_w];
                        }
                    }
                }
            }
        }
        if (!bias.empty())
            for (std::size_t i = 0; i < oh * ow; ++i) plane[i] += bias[oc];
    }
}

/// Accumulates (+=) gradients of conv2d_forward into grad_in, grad_weight, grad_bias.
/// Any of the gradient spans may be empty to skip it.
template <class T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                     std::span<const T> grad_out, std::span<T> grad_in, std::span<T> grad_weight,
                     std::span<T> grad_bias) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const std::size_t cig = g.in_per_group(), cog = g.out_per_group();
    for (std::size_t oc = 0; oc < g.c_out; ++oc) {
        const T* gplane = grad_out.data() + oc * oh * ow;
        if (!grad_bias.empty()) {
            T acc = 0;
            for (std::size_t i = 0; i < oh * ow; ++i) acc += gplane[i];
            grad_bias[oc] += acc;
        }
        const std::size_t grp = oc / cog;
        for (std::size_t icg = 0; icg < cig; ++icg) {
            const std::size_t ic = grp * cig + icg;
            const T* src = in.data() + ic * g.h * g.w;
            const std::size_t wbase = ((oc * cig + icg) * g.kh) * g.kw;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                std::size_t y0, y1;
                detail::valid_range(ky, g.pad_h, g.stride_h, g.h, oh, y0, y1);
                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                    std::size_t x0, x1;
                    detail::valid_range(kx, g.pad_w, g.stride_w, g.w, ow, x0, x1);
                    const T wv = weight[wbase + ky * g.kw + kx];
                    T wacc = 0;
                    for (std::size_t oy = y0; oy < y1; ++oy) {
                        const std::size_t iy = oy * g.stride_h + ky - g.pad_h;
                        for (std::size_t ox = x0; ox < x1; ++ox) {
                            const std::size_t ix = ox * g.stride_w + kx - g.pad_w;
                            const T go = gplane[oy * ow + ox];
                            wacc += go * src[iy * g.w + ix];
                            if (!grad_in.empty()) grad_in[ic * g.h * g.w + iy * g.w + ix] += go * wv;
                        }
                    }
                    if (!grad_weight.empty()) grad_weight[wbase + ky * g.kw + kx] += wacc;
                }
            }
        }
    }
}

/// Per-channel normalization over a plane of `plane` elements: population variance,
/// eps inside the square root, then gamma/beta.
template <class T>
void instance_norm_forward(std::size_t channels, std::size_t plane, std::span<const T> in,
                           std::span<const T> gamma, std::span<const T> beta, T eps, std::span<T> out) {
    for (std::size_t c = 0; c < channels; ++c) {
        const T* x = in.data() + c * plane;
        T* y = out.data() + c * plane;
        T mean = 0;
        for (std::size_t i = 0; i < plane; ++i) mean += x[i];
        mean /= static_cast<T>(plane);
        T var = 0;
        for (std::size_t i = 0; i < plane; ++i) var += (x[i] - mean) * (x[i] - mean);
        var /= static_cast<T>(plane);
        const T inv = T(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < plane; ++i) y[i] = (x[i] - mean) * inv * gamma[c] + beta[c];
    }
}

template <class T>
void instance_norm_backward(std::size_t channels, std::size_t plane, std::span<const T> in,
                            std::span<const T> gamma, T eps, std::span<const T> grad_out,
                            std::span<T> grad_in, std::span<T> grad_gamma, std::span<T> grad_beta) {
    const T n = static_cast<T>(plane);
    for (std::size_t c = 0; c < channels; ++c) {
        const T* x = in.data() + c * plane;
        const T* gy = grad_out.data() + c * plane;
        T mean = 0;
        for (std::size_t i = 0; i < plane; ++i) mean += x[i];
        mean /= n;
        T var = 0;
        for (std::size_t i = 0; i < plane; ++i) var += (x[i] - mean) * (x[i] - mean);
        var /= n;
        const T inv = T(1) / std::sqrt(var + eps);
        T sum_g = 0, sum_gx = 0;
        for (std::size_t i = 0; i < plane; ++i) {
            const T xhat = (x[i] - mean) * inv;
            sum_g += gy[i];
            sum_gx += gy[i] * xhat;
        }
        if (!grad_gamma.empty()) grad_gamma[c] += sum_gx;
        if (!grad_beta.empty()) grad_beta[c] += sum_g;
        if (!grad_in.empty()) {
            const T k = gamma[c] * inv / n;
            for (std::size_t i = 0; i < plane; ++i) {
                const T xhat = (x[i] - mean) * inv;
                grad_in[c * plane + i] += k * (n * gy[i] - sum_g - xhat * sum_gx);
            }
        }
    }
}

template <class T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <class T>
T silu(T x) {
    return x * sigmoid(x);
}

template <class T>
T relu(T x) {
    return x > T(0) ? x : T(0);
}

/// Heatmap grid geometry: cell (row, col) decodes to ((col+0.5)*stride, (row+0.5)*stride).
struct DecodeGrid {
    std::size_t height = 64, width = 64;
    double stride = 4.0;
};

/// Sum-mode soft-argmax of one channel: negative cells count as 0, the rest are divided
/// by their total. Returns false (and writes the grid centroid) when the total is <= eps.
/// Sums are carried in double whatever the storage type, so the result is limited only by
/// the output type's resolution.
template <class T, class Out>
bool soft_argmax_sum(const DecodeGrid& grid, std::span<const T> heat, double eps, Out& x, Out& y) {
    double total = 0, sx = 0, sy = 0;
    for (std::size_t r = 0; r < grid.height; ++r) {
        const double oy = (static_cast<double>(r) + 0.5) * grid.stride;
        for (std::size_t c = 0; c < grid.width; ++c) {
            const double v = static_cast<double>(heat[r * grid.width + c]);
            if (v > 0) {
                const double ox = (static_cast<double>(c) + 0.5) * grid.stride;
                total += v;
                sx += v * ox;
                sy += v * oy;
            }
        }
    }
    if (!(total > eps)) {
        x = static_cast<Out>(static_cast<double>(grid.width) * grid.stride / 2);
        y = static_cast<Out>(static_cast<double>(grid.height) * grid.stride / 2);
        return false;
    }
    x = static_cast<Out>(sx / total);
    y = static_cast<Out>(sy / total);
    return true;
}

/// Gradient of soft_argmax_sum (quotient rule). Accumulates into grad_heat.
template <class T>
void soft_argmax_sum_backward(const DecodeGrid& grid, std::span<const T> heat, double eps, T grad_x, T grad_y,
                              std::span<T> grad_heat) {
    double total = 0, sx = 0, sy = 0;
    for (std::size_t r = 0; r < grid.height; ++r)
        for (std::size_t c = 0; c < grid.width; ++c) {
            const double v = static_cast<double>(heat[r * grid.width + c]);
            if (v > 0) {
                total += v;
                sx += v * (static_cast<double>(c) + 0.5) * grid.stride;
                sy += v * (static_cast<double>(r) + 0.5) * grid.stride;
            }
        }
    if (!(total > eps)) return;
    const double x = sx / total, y = sy / total;
    for (std::size_t r = 0; r < grid.height; ++r)
        for (std::size_t c = 0; c < grid.width; ++c) {
            const std::size_t k = r * grid.width + c;
            if (heat[k] > T(0)) {
                const double ox = (static_cast<double>(c) + 0.5) * grid.stride;
                const double oy = (static_cast<double>(r) + 0.5) * grid.stride;
                grad_heat[k] += static_cast<T>((grad_x * (ox - x) + grad_y * (oy - y)) / total);
            }
        }
}

/// Softmax-mode soft-argmax with temperature tau.
template <class T, class Out>
void soft_argmax_softmax(const DecodeGrid& grid, std::span<const T> heat, double tau, Out& x, Out& y) {
    double mx = static_cast<double>(heat[0]);
    for (T v : heat) mx = std::max(mx, static_cast<double>(v));
    double total = 0, sx = 0, sy = 0;
    for (std::size_t r = 0; r < grid.height; ++r)
        for (std::size_t c = 0; c < grid.width; ++c) {
            const double e = std::exp((static_cast<double>(heat[r * grid.width + c]) - mx) / tau);
            total += e;
            sx += e * (static_cast<double>(c) + 0.5) * grid.stride;
            sy += e * (static_cast<double>(r) + 0.5) * grid.stride;
        }
    x = static_cast<Out>(sx / total);
    y = static_cast<Out>(sy / total);
}

/// Sum over channels of the L2 distance between matching channels.
template <class T>
T heatmap_l2_sum(std::size_t channels, std::size_t plane, std::span<const T> a, std::span<const T> b) {
    T loss = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        T ss = 0;
        for (std::size_t k = 0; k < plane; ++k) {
            const T d = a[c * plane + k] - b[c * plane + k];
            ss += d * d;
        }
        loss += std::sqrt(ss);
    }
    return loss;
}

/// Point masks: mask_i = product over edges e with incidence[i*E+e] of edge_e.
template <class T>
void e2p_forward(std::size_t points, std::size_t edges, std::size_t plane,
                 std::span<const unsigned char> incidence, std::span<const T> edge, std::span<T> out) {
    for (std::size_t i = 0; i < points; ++i) {
        T* dst = out.data() + i * plane;
        std::fill(dst, dst + plane, T(1));
        for (std::size_t e = 0; e < edges; ++e) {
            if (!incidence[i * edges + e]) continue;
            const T* src = edge.data() + e * plane;
            for (std::size_t k = 0; k < plane; ++k) dst[k] *= src[k];
        }
    }
}

template <class T>
void e2p_backward(std::size_t points, std::size_t edges, std::size_t plane,
                  std::span<const unsigned char> incidence, std::span<const T> edge,
                  std::span<const T> grad_out, std::span<T> grad_edge) {
    for (std::size_t i = 0; i < points; ++i)
        for (std::size_t e = 0; e < edges; ++e) {
            if (!incidence[i * edges + e]) continue;
            for (std::size_t k = 0; k < plane; ++k) {
                T others = 1;
                for (std::size_t f = 0; f < edges; ++f)
                    if (f != e && incidence[i * edges + f]) others *= edge[f * plane + k];
                grad_edge[e * plane + k] += grad_out[i * plane + k] * others;
            }
        }
}

} // namespace lmk::kernels
