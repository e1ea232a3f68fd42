#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lmk/error.hpp"
#include "lmk/kernels.hpp"
#include "lmk/tensor.hpp"

namespace lmk {

// ---------------------------------------------------------------------------
// Op trace: records the rank of every permute on the current thread while a
// TraceScope is alive. Used to check structurally that a decomposition never
// issues a permutation above a given rank.
// ---------------------------------------------------------------------------

struct TraceEntry {
    std::string op;
    std::size_t rank;
};

namespace detail {
inline thread_local std::vector<TraceEntry>* active_trace = nullptr;

inline void record(const char* op, std::size_t rank) {
    if (active_trace) active_trace->push_back({op, rank});
}
} // namespace detail

class TraceScope {
public:
    TraceScope() : previous_(detail::active_trace) { detail::active_trace = &entries_; }
    ~TraceScope() { detail::active_trace = previous_; }
    TraceScope(const TraceScope&) = delete;
    TraceScope& operator=(const TraceScope&) = delete;

    const std::vector<TraceEntry>& entries() const noexcept { return entries_; }

private:
    std::vector<TraceEntry> entries_;
    std::vector<TraceEntry>* previous_;
};

// ---------------------------------------------------------------------------
// Convolution and normalization
// ---------------------------------------------------------------------------

struct Conv2dOptions {
    std::size_t stride_h = 1, stride_w = 1;
    std::size_t pad_h = 0, pad_w = 0;
    std::size_t groups = 1;
};

inline kernels::ConvGeometry conv_geometry(const Shape& input, const Shape& weight, const Conv2dOptions& opt) {
    if (input.size() != 3) throw ShapeError("conv2d input must be [C,H,W], got " + to_string(input));
    if (weight.size() != 4) throw ShapeError("conv2d weight must be [Cout,Cin/g,kH,kW], got " + to_string(weight));
    if (opt.groups == 0 || opt.stride_h == 0 || opt.stride_w == 0) throw ArgumentError("conv2d: zero stride or groups");
    kernels::ConvGeometry g;
    g.c_in = input[0];
    g.h = input[1];
    g.w = input[2];
    g.c_out = weight[0];
    g.kh = weight[2];
    g.kw = weight[3];
    g.stride_h = opt.stride_h;
    g.stride_w = opt.stride_w;
    g.pad_h = opt.pad_h;
    g.pad_w = opt.pad_w;
    g.groups = opt.groups;
    if (g.c_in % g.groups != 0)
        throw ShapeError("conv2d: input channels (axis 0) = " + std::to_string(g.c_in) +
                         " not divisible by groups " + std::to_string(g.groups));
    if (g.c_out % g.groups != 0)
        throw ShapeError("conv2d: output channels (weight axis 0) = " + std::to_string(g.c_out) +
                         " not divisible by groups " + std::to_string(g.groups));
    if (weight[1] != g.c_in / g.groups)
        throw ShapeError("conv2d: weight axis 1 is " + std::to_string(weight[1]) + ", expected Cin/groups = " +
                         std::to_string(g.c_in / g.groups));
    if (g.h + 2 * g.pad_h < g.kh) throw ShapeError("conv2d: kernel height exceeds padded input (axis 1)");
    if (g.w + 2 * g.pad_w < g.kw) throw ShapeError("conv2d: kernel width exceeds padded input (axis 2)");
    return g;
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, const Conv2dOptions& opt = {}) {
    const detail::F32 x(input), w(weight);
    const auto g = conv_geometry(x->shape(), w->shape(), opt);
    std::span<const float> b;
    std::optional<detail::F32> bf;
    if (bias) {
        bf.emplace(*bias);
        if ((*bf)->shape() != Shape{g.c_out})
            throw ShapeError("conv2d: bias shape " + to_string((*bf)->shape()) + " does not match Cout " +
                             std::to_string(g.c_out));
        b = (**bf).values();
    }
    Tensor out(Shape{g.c_out, g.out_h(), g.out_w()});
    kernels::conv2d_forward<float>(g, x->values(), w->values(), b, out.mutable_values());
    return out;
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt = {}) {
    return conv2d(input, weight, &bias, opt);
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Conv2dOptions& opt = {}) {
    return conv2d(input, weight, nullptr, opt);
}

namespace detail {
inline void check_channel_params(const char* op, const Tensor& x, const Tensor& a, const Tensor& b) {
    if (a.shape() != Shape{x.dim(0)} || b.shape() != Shape{x.dim(0)})
        throw ShapeError(std::string(op) + ": per-channel parameters must be [" + std::to_string(x.dim(0)) + "]");
}
} // namespace detail

/// Normalizes each channel of [C, ...] over its remaining axes.
inline Tensor instance_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    const detail::F32 x(input), g(gamma), b(beta);
    if (x->rank() < 2) throw ShapeError("instance_norm: input needs a channel axis and a spatial extent");
    detail::check_channel_params("instance_norm", *x, *g, *b);
    Tensor out(x->shape());
    const std::size_t c = x->dim(0);
    kernels::instance_norm_forward<float>(c, x->numel() / c, x->values(), g->values(), b->values(), eps,
                                          out.mutable_values());
    return out;
}

/// Per-channel scale and shift of [C, ...] (inference-form batch norm).
inline Tensor channel_affine(const Tensor& input, const Tensor& scale, const Tensor& shift) {
    const detail::F32 x(input), s(scale), t(shift);
    detail::check_channel_params("channel_affine", *x, *s, *t);
    Tensor out(x->shape());
    const std::size_t c = x->dim(0), plane = x->numel() / c;
    auto src = x->values();
    auto dst = out.mutable_values();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i)
            dst[ch * plane + i] = src[ch * plane + i] * (*s)[ch] + (*t)[ch];
    return out;
}

/// Layer norm across axis 0 of [C, ...] independently at every remaining position.
inline Tensor layer_norm_channels(const Tensor& input, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    const detail::F32 x(input), g(gamma), b(beta);
    detail::check_channel_params("layer_norm_channels", *x, *g, *b);
    const std::size_t c = x->dim(0), plane = x->numel() / c;
    Tensor out(x->shape());
    auto src = x->values();
    auto dst = out.mutable_values();
    for (std::size_t p = 0; p < plane; ++p) {
        float mean = 0;
        for (std::size_t ch = 0; ch < c; ++ch) mean += src[ch * plane + p];
        mean /= static_cast<float>(c);
        float var = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const float d = src[ch * plane + p] - mean;
            var += d * d;
        }
        var /= static_cast<float>(c);
        const float inv = 1.0f / std::sqrt(var + eps);
        for (std::size_t ch = 0; ch < c; ++ch)
            dst[ch * plane + p] = (src[ch * plane + p] - mean) * inv * (*g)[ch] + (*b)[ch];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class F>
Tensor map(const Tensor& input, F&& f) {
    const detail::F32 x(input);
    Tensor out(x->shape());
    std::transform(x->values().begin(), x->values().end(), out.mutable_values().begin(), f);
    return out;
}

inline Tensor sigmoid(const Tensor& x) { return map(x, kernels::sigmoid<float>); }
inline Tensor relu(const Tensor& x) { return map(x, kernels::relu<float>); }
inline Tensor silu(const Tensor& x) { return map(x, kernels::silu<float>); }

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b) + " at axis " +
                             std::to_string(i));
        out[i] = std::max(da, db);
    }
    return out;
}

namespace detail {
inline Shape broadcast_strides(const Shape& in, const Shape& out) {
    const Shape s = row_major_strides(in);
    Shape bs(out.size(), 0);
    const std::size_t off = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) bs[i + off] = in[i] == 1 ? 0 : s[i];
    return bs;
}

template <class F>
Tensor broadcast_binary(const Tensor& lhs, const Tensor& rhs, F&& f) {
    const F32 a(lhs), b(rhs);
    const Shape shape = broadcast_shape(a->shape(), b->shape());
    const Shape sa = broadcast_strides(a->shape(), shape), sb = broadcast_strides(b->shape(), shape);
    Tensor out(shape);
    auto dst = out.mutable_values();
    auto va = a->values(), vb = b->values();
    std::vector<std::size_t> idx(shape.size(), 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t flat = 0; flat < dst.size(); ++flat) {
        dst[flat] = f(va[oa], vb[ob]);
        for (std::size_t ax = shape.size(); ax-- > 0;) {
            if (++idx[ax] < shape[ax]) {
                oa += sa[ax];
                ob += sb[ax];
                break;
            }
            oa -= sa[ax] * (shape[ax] - 1);
            ob -= sb[ax] * (shape[ax] - 1);
            idx[ax] = 0;
        }
    }
    return out;
}
} // namespace detail

/// Broadcasting add with trailing-axis alignment.
inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::broadcast_binary(a, b, [](float x, float y) { return x + y; });
}

/// Broadcasting multiply with trailing-axis alignment.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::broadcast_binary(a, b, [](float x, float y) { return x * y; });
}

// ---------------------------------------------------------------------------
// Shape ops. All pure data movement.
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) { return x.reshaped(std::move(shape)); }

inline void check_permutation(const std::vector<std::size_t>& order, std::size_t rank) {
    if (order.size() != rank)
        throw ArgumentError("axis order has " + std::to_string(order.size()) + " entries for rank " +
                            std::to_string(rank));
    std::vector<bool> seen(rank, false);
    for (std::size_t a : order) {
        if (a >= rank || seen[a]) throw ArgumentError("axis order is not a permutation of 0.." + std::to_string(rank - 1));
        seen[a] = true;
    }
}

/// out.shape[i] = x.shape[order[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
    check_permutation(order, x.rank());
    detail::record("permute", x.rank());
    const Shape& in_shape = x.shape();
    const Shape in_strides = row_major_strides(in_shape);
    Shape shape(x.rank()), src_strides(x.rank());
    for (std::size_t i = 0; i < order.size(); ++i) {
        shape[i] = in_shape[order[i]];
        src_strides[i] = in_strides[order[i]];
    }
    std::vector<std::size_t> idx(shape.size(), 0);
    std::size_t src = 0;
    const std::size_t n = x.numel();
    auto gather = [&](auto&& emit) {
        for (std::size_t flat = 0; flat < n; ++flat) {
            emit(flat, src);
            for (std::size_t ax = shape.size(); ax-- > 0;) {
                if (++idx[ax] < shape[ax]) {
                    src += src_strides[ax];
                    break;
                }
                src -= src_strides[ax] * (shape[ax] - 1);
                idx[ax] = 0;
            }
        }
    };
    if (x.dtype() == DType::f16) {
        std::vector<std::uint16_t> bits(n);
        auto in = x.half_bits();
        gather([&](std::size_t o, std::size_t s) { bits[o] = in[s]; });
        return Tensor::from_half_bits(shape, std::move(bits));
    }
    std::vector<float> out(n);
    auto in = x.values();
    gather([&](std::size_t o, std::size_t s) { out[o] = in[s]; });
    return Tensor(shape, std::move(out));
}

/// Splits along `axis` into pieces of the given sizes (must sum to the extent).
inline std::vector<Tensor> split(const Tensor& input, int axis, const std::vector<std::size_t>& sizes) {
    const detail::F32 x(input);
    const std::size_t ax = x->normalize_axis(axis);
    if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != x->dim(static_cast<int>(ax)))
        throw ShapeError("split sizes do not sum to extent of axis " + std::to_string(ax));
    const Shape& s = x->shape();
    const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + ax));
    const std::size_t inner = shape_numel(Shape(s.begin() + ax + 1, s.end()));
    std::vector<Tensor> parts;
    std::size_t start = 0;
    auto src = x->values();
    for (std::size_t len : sizes) {
        Shape ps = s;
        ps[ax] = len;
        std::vector<float> v;
        v.reserve(outer * len * inner);
        for (std::size_t o = 0; o < outer; ++o) {
            const auto* base = src.data() + (o * s[ax] + start) * inner;
            v.insert(v.end(), base, base + len * inner);
        }
        parts.emplace_back(std::move(ps), std::move(v));
        start += len;
    }
    return parts;
}

/// Splits along `axis` into `parts` equal pieces.
inline std::vector<Tensor> split(const Tensor& x, int axis, std::size_t parts) {
    const std::size_t extent = x.dim(axis);
    if (parts == 0 || extent % parts != 0)
        throw ShapeError("axis " + std::to_string(axis) + " of extent " + std::to_string(extent) +
                         " cannot be split into " + std::to_string(parts) + " equal parts");
    return split(x, axis, std::vector<std::size_t>(parts, extent / parts));
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw ArgumentError("concat of zero tensors");
    const std::size_t ax = xs.front().normalize_axis(axis);
    Shape shape = xs.front().shape();
    shape[ax] = 0;
    for (const auto& t : xs) {
        if (t.rank() != shape.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < shape.size(); ++i)
            if (i != ax && t.shape()[i] != shape[i])
                throw ShapeError("concat: extent mismatch on axis " + std::to_string(i) + " (" +
                                 to_string(t.shape()) + ")");
        shape[ax] += t.shape()[ax];
    }
    const std::size_t outer = shape_numel(Shape(shape.begin(), shape.begin() + ax));
    const std::size_t inner = shape_numel(Shape(shape.begin() + ax + 1, shape.end()));
    std::vector<float> out;
    out.reserve(shape_numel(shape));
    std::deque<detail::F32> views;
    for (const auto& t : xs) views.emplace_back(t);
    for (std::size_t o = 0; o < outer; ++o)
        for (const auto& v : views) {
            const std::size_t chunk = v->shape()[ax] * inner;
            const auto* base = v->values().data() + o * chunk;
            out.insert(out.end(), base, base + chunk);
        }
    return Tensor(std::move(shape), std::move(out));
}

inline Tensor squeeze(const Tensor& x, int axis) {
    const std::size_t ax = x.normalize_axis(axis);
    if (x.shape()[ax] != 1) throw ShapeError("squeeze: axis " + std::to_string(ax) + " has extent " + std::to_string(x.shape()[ax]));
    Shape s = x.shape();
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(ax));
    return x.reshaped(std::move(s));
}

/// Inserts a unit axis so that it sits at position `axis` of the result.
inline Tensor unsqueeze(const Tensor& x, int axis) {
    const int r = static_cast<int>(x.rank()) + 1;
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ArgumentError("unsqueeze: axis " + std::to_string(axis) + " out of range");
    Shape s = x.shape();
    s.insert(s.begin() + a, 1);
    return x.reshaped(std::move(s));
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

enum class UpsampleMode { nearest, bilinear };

/// Enlarges [C,h,w] to [C,H,W]. Bilinear uses the half-pixel (align-corners=false) mapping.
inline Tensor upsample(const Tensor& input, std::size_t out_h, std::size_t out_w, UpsampleMode mode) {
    const detail::F32 x(input);
    if (x->rank() != 3) throw ShapeError("upsample expects [C,H,W], got " + to_string(x->shape()));
    const std::size_t c = x->dim(0), h = x->dim(1), w = x->dim(2);
    if (out_h < h) throw ShapeError("upsample: target height " + std::to_string(out_h) + " below input " + std::to_string(h));
    if (out_w < w) throw ShapeError("upsample: target width " + std::to_string(out_w) + " below input " + std::to_string(w));
    Tensor out(Shape{c, out_h, out_w});
    auto src = x->values();
    auto dst = out.mutable_values();
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    if (mode == UpsampleMode::nearest) {
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < out_h; ++y) {
                const auto iy = std::min(h - 1, static_cast<std::size_t>(std::floor(y * sy)));
                for (std::size_t xo = 0; xo < out_w; ++xo) {
                    const auto ix = std::min(w - 1, static_cast<std::size_t>(std::floor(xo * sx)));
                    dst[(ch * out_h + y) * out_w + xo] = src[(ch * h + iy) * w + ix];
                }
            }
        return out;
    }
    auto axis_taps = [](std::size_t n_out, std::size_t n_in, double scale) {
        std::vector<std::pair<std::size_t, float>> taps(n_out);  // (lower index, weight of upper)
        for (std::size_t o = 0; o < n_out; ++o) {
            double src_pos = (static_cast<double>(o) + 0.5) * scale - 0.5;
            if (src_pos < 0) src_pos = 0;
            auto lo = static_cast<std::size_t>(std::floor(src_pos));
            if (lo > n_in - 1) lo = n_in - 1;
            taps[o] = {lo, static_cast<float>(src_pos - static_cast<double>(lo))};
        }
        return taps;
    };
    const auto ty = axis_taps(out_h, h, sy), tx = axis_taps(out_w, w, sx);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const float* plane = src.data() + ch * h * w;
        for (std::size_t y = 0; y < out_h; ++y) {
            const std::size_t y0 = ty[y].first, y1 = std::min(y0 + 1, h - 1);
            const float fy = ty[y].second;
            for (std::size_t xo = 0; xo < out_w; ++xo) {
                const std::size_t x0 = tx[xo].first, x1 = std::min(x0 + 1, w - 1);
                const float fx = tx[xo].second;
                const float top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
                const float bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
                dst[(ch * out_h + y) * out_w + xo] = top * (1 - fy) + bot * fy;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and linear algebra
// ---------------------------------------------------------------------------

namespace detail {
struct AxisSplit {
    std::size_t outer, extent, inner;
};
inline AxisSplit axis_split(const Tensor& x, std::size_t ax) {
    const Shape& s = x.shape();
    return {shape_numel(Shape(s.begin(), s.begin() + ax)), s[ax], shape_numel(Shape(s.begin() + ax + 1, s.end()))};
}
} // namespace detail

inline Tensor softmax(const Tensor& input, int axis) {
    const detail::F32 x(input);
    const std::size_t ax = x->normalize_axis(axis);
    const auto [outer, extent, inner] = detail::axis_split(*x, ax);
    Tensor out(x->shape());
    auto src = x->values();
    auto dst = out.mutable_values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * extent * inner + i;
            float mx = src[base];
            for (std::size_t k = 1; k < extent; ++k) mx = std::max(mx, src[base + k * inner]);
            float total = 0;
            for (std::size_t k = 0; k < extent; ++k) {
                const float e = std::exp(src[base + k * inner] - mx);
                dst[base + k * inner] = e;
                total += e;
            }
            for (std::size_t k = 0; k < extent; ++k) dst[base + k * inner] /= total;
        }
    return out;
}

/// Sum along `axis`, accumulated left to right in f32.
inline Tensor sum(const Tensor& input, int axis, bool keepdim = false) {
    const detail::F32 x(input);
    const std::size_t ax = x->normalize_axis(axis);
    const auto [outer, extent, inner] = detail::axis_split(*x, ax);
    Shape shape = x->shape();
    if (keepdim || shape.size() == 1)
        shape[ax] = 1;
    else
        shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
    Tensor out(shape);
    auto src = x->values();
    auto dst = out.mutable_values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            float acc = 0;
            for (std::size_t k = 0; k < extent; ++k) acc += src[(o * extent + k) * inner + i];
            dst[o * inner + i] = acc;
        }
    return out;
}

/// [..., M, K] x [..., K, N] -> [..., M, N]; leading axes must match exactly.
inline Tensor matmul_batched(const Tensor& lhs, const Tensor& rhs) {
    const detail::F32 a(lhs), b(rhs);
    if (a->rank() < 2 || a->rank() != b->rank())
        throw ShapeError("matmul_batched: operands must share rank >= 2, got " + to_string(a->shape()) + " and " +
                         to_string(b->shape()));
    const std::size_t r = a->rank();
    for (std::size_t i = 0; i + 2 < r; ++i)
        if (a->shape()[i] != b->shape()[i])
            throw ShapeError("matmul_batched: batch axis " + std::to_string(i) + " differs");
    const std::size_t m = a->shape()[r - 2], k = a->shape()[r - 1], n = b->shape()[r - 1];
    if (b->shape()[r - 2] != k)
        throw ShapeError("matmul_batched: inner dims differ (" + std::to_string(k) + " vs " +
                         std::to_string(b->shape()[r - 2]) + ")");
    Shape shape = a->shape();
    shape[r - 1] = n;
    Tensor out(shape);
    const std::size_t batch = a->numel() / (m * k);
    auto va = a->values(), vb = b->values();
    auto dst = out.mutable_values();
    for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                float acc = 0;
                for (std::size_t p = 0; p < k; ++p) acc += va[(bi * m + i) * k + p] * vb[(bi * k + p) * n + j];
                dst[(bi * m + i) * n + j] = acc;
            }
    return out;
}

} // namespace lmk
