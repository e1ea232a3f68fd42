#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lmk/config.hpp"
#include "lmk/kernels.hpp"
#include "lmk/naming.hpp"
#include "lmk/ops.hpp"
#include "lmk/patch_ops.hpp"
#include "lmk/weights.hpp"

namespace lmk {

struct Point {
    double x = 0;
    double y = 0;
};

/// Landmark coordinates in input-pixel units (pixel i spans [i, i+1)).
struct LandmarkSet {
    std::vector<Point> points;

    std::size_t size() const { return points.size(); }
};

/// Point (sigmoid) heatmaps [N,H,W] and edge (sigmoid) heatmaps [E,H,W].
struct HeatmapSet {
    Tensor point;
    Tensor edge;
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

inline Tensor activate(const Tensor& x, Activation act) { return act == Activation::silu ? silu(x) : relu(x); }

inline Tensor apply_norm(const Tensor& x, const WeightStore& w, const std::string& layer, const ModelConfig& cfg) {
    const Tensor& scale = w.get(layer + ".weight");
    const Tensor& shift = w.get(layer + ".bias");
    return cfg.backbone_norm == NormKind::affine ? channel_affine(x, scale, shift)
                                                 : instance_norm(x, scale, shift, cfg.norm_eps);
}

inline Tensor conv_layer(const Tensor& x, const WeightStore& w, const std::string& layer, std::size_t stride = 1,
                         std::size_t groups = 1) {
    const Tensor& weight = w.get(layer + ".weight");
    Conv2dOptions opt;
    opt.stride_h = opt.stride_w = stride;
    opt.pad_h = weight.dim(2) / 2;
    opt.pad_w = weight.dim(3) / 2;
    opt.groups = groups;
    const std::string bias = layer + ".bias";
    return w.contains(bias) ? conv2d(x, weight, w.get(bias), opt) : conv2d(x, weight, opt);
}

/// Inverted residual: 1x1 expand -> depthwise 3x3 (stride) -> 1x1 project, with a skip
/// connection when stride is 1 and channel counts match.
inline Tensor mv2_block(const Tensor& x, const WeightStore& w, const std::string& prefix, std::size_t stride,
                        const ModelConfig& cfg) {
    if (stride != 1 && stride != 2) throw ArgumentError("mv2 stride must be 1 or 2");
    Tensor h = activate(apply_norm(conv_layer(x, w, prefix + "expand"), w, prefix + "expand_norm", cfg), cfg.activation);
    const std::size_t hidden = h.dim(0);
    h = activate(apply_norm(conv_layer(h, w, prefix + "dw", stride, hidden), w, prefix + "dw_norm", cfg), cfg.activation);
    h = apply_norm(conv_layer(h, w, prefix + "project"), w, prefix + "project_norm", cfg);
    if (stride == 1 && h.shape() == x.shape()) return add(x, h);
    return h;
}

/// Linear-cost attention over [B,d,P,N] tokens (P pixels per patch, N patches).
/// A one-channel query is softmaxed over N; the score-weighted sum of keys forms a
/// context vector per patch pixel which gates relu(value), followed by an output projection.
inline Tensor separable_attention(const Tensor& tokens, const WeightStore& w, const std::string& layer) {
    if (tokens.rank() != 4) throw ShapeError("separable_attention expects [B,d,P,N], got " + to_string(tokens.shape()));
    const std::size_t d = tokens.dim(1);
    const Tensor& qkv_w = w.get(layer + "_qkv.weight");
    if (qkv_w.dim(1) != d) throw ShapeError("separable_attention: qkv expects d = " + std::to_string(qkv_w.dim(1)));
    std::vector<Tensor> outs;
    for (const Tensor& item : split(tokens, 0, tokens.dim(0))) {
        const Tensor x = squeeze(item, 0);
        const Tensor qkv = conv_layer(x, w, layer + "_qkv");
        const auto parts = split(qkv, 0, std::vector<std::size_t>{1, d, d});
        const Tensor scores = softmax(parts[0], -1);
        const Tensor context = sum(mul(parts[1], scores), -1, true);
        const Tensor gated = mul(relu(parts[2]), context);
        outs.push_back(unsqueeze(conv_layer(gated, w, layer + "_out"), 0));
    }
    return concat(outs, 0);
}

namespace detail {

inline Tensor per_item(const Tensor& tokens, auto&& f) {
    std::vector<Tensor> outs;
    for (const Tensor& item : split(tokens, 0, tokens.dim(0))) outs.push_back(unsqueeze(f(squeeze(item, 0)), 0));
    return concat(outs, 0);
}

inline Tensor token_norm(const Tensor& tokens, const WeightStore& w, const std::string& layer, float eps) {
    return per_item(tokens, [&](const Tensor& x) {
        return layer_norm_channels(x, w.get(layer + ".weight"), w.get(layer + ".bias"), eps);
    });
}

} // namespace detail

/// One pre-norm transformer layer: x + attn(LN(x)), then x + ffn(LN(x)).
inline Tensor transformer_layer(const Tensor& tokens, const WeightStore& w, const std::string& prefix, std::size_t l,
                                const ModelConfig& cfg) {
    const std::string a = prefix + "attn" + std::to_string(l), f = prefix + "ffn" + std::to_string(l);
    Tensor x = add(tokens, separable_attention(detail::token_norm(tokens, w, a + "_norm", cfg.norm_eps), w, a));
    const Tensor normed = detail::token_norm(x, w, f + "_norm", cfg.norm_eps);
    const Tensor ffn = detail::per_item(normed, [&](const Tensor& t) {
        return conv_layer(activate(conv_layer(t, w, f + "_fc1"), cfg.activation), w, f + "_fc2");
    });
    return add(x, ffn);
}

/// Local depthwise/pointwise convs, patch unfold, transformer stack, fold, 1x1 projection.
inline Tensor mobilevit_v2_block(const Tensor& x, const WeightStore& w, const std::string& prefix, std::size_t depth,
                                 const ModelConfig& cfg) {
    if (x.rank() != 3) throw ShapeError("mobilevit block expects [C,H,W]");
    const PatchSpec spec{cfg.patch, cfg.patch};
    spec.check({1, x.dim(0), x.dim(1), x.dim(2)});
    const std::size_t h = x.dim(1), wd = x.dim(2);
    Tensor local = activate(apply_norm(conv_layer(x, w, prefix + "local_dw", 1, x.dim(0)), w, prefix + "local_norm", cfg),
                            cfg.activation);
    local = conv_layer(local, w, prefix + "local_pw");
    Tensor tokens = unfold_foldfree(unsqueeze(local, 0), spec);
    for (std::size_t l = 0; l < depth; ++l) tokens = transformer_layer(tokens, w, prefix, l, cfg);
    tokens = detail::token_norm(tokens, w, prefix + "final_norm", cfg.norm_eps);
    const Tensor folded = squeeze(fold_foldfree(tokens, spec, h, wd), 0);
    return apply_norm(conv_layer(folded, w, prefix + "proj"), w, prefix + "proj_norm", cfg);
}

struct BackboneOutput {
    std::vector<Tensor> stages;  // outputs of stages 0..5
    const Tensor& features() const { return stages.back(); }
};

inline BackboneOutput backbone_forward(const Tensor& image, const WeightStore& w, const ModelConfig& cfg) {
    if (image.shape() != Shape{3, cfg.input_size, cfg.input_size})
        throw ShapeError("backbone expects [3," + std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                         "], got " + to_string(image.shape()));
    using naming::prefix;
    BackboneOutput out;
    Tensor x = activate(apply_norm(conv_layer(image, w, prefix(0, 0) + "conv", 2), w, prefix(0, 0) + "norm", cfg),
                        cfg.activation);
    out.stages.push_back(x);
    x = mv2_block(x, w, prefix(1, 0), 1, cfg);
    out.stages.push_back(x);
    x = mv2_block(x, w, prefix(2, 0), 2, cfg);
    for (std::size_t r = 0; r < cfg.stage2_repeats; ++r) x = mv2_block(x, w, prefix(2, r + 1), 1, cfg);
    out.stages.push_back(x);
    for (std::size_t s = 3; s <= 5; ++s) {
        x = mv2_block(x, w, prefix(s, 0), 2, cfg);
        x = mobilevit_v2_block(x, w, prefix(s, 1), cfg.attention_depth[s - 3], cfg);
        out.stages.push_back(x);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Heatmap generator
// ---------------------------------------------------------------------------

/// mask_i = product of edge maps incident to landmark i. `incidence` is [N][E] row-major.
inline Tensor e2p_transform(const Tensor& edge, std::span<const unsigned char> incidence, std::size_t num_landmarks) {
    const detail::F32 e(edge);
    if (e->rank() != 3) throw ShapeError("e2p expects [E,H,W]");
    const std::size_t edges = e->dim(0), plane = e->dim(1) * e->dim(2);
    if (incidence.size() != num_landmarks * edges) throw ShapeError("incidence matrix must be N x E");
    for (std::size_t i = 0; i < num_landmarks; ++i) {
        bool any = false;
        for (std::size_t k = 0; k < edges; ++k) any = any || incidence[i * edges + k];
        if (!any) throw ArgumentError("incidence row " + std::to_string(i) + " is all zero");
    }
    Tensor out(Shape{num_landmarks, e->dim(1), e->dim(2)});
    kernels::e2p_forward<float>(num_landmarks, edges, plane, incidence, e->values(), out.mutable_values());
    return out;
}

struct GeneratorOutput {
    HeatmapSet maps;
    Tensor mask;      // point * e2p(edge)
    Tensor raw;       // relu(instance_norm(conv(feat)))
    Tensor attended;  // raw * mask
    Tensor refined;   // attended + conv(conv(conv(attended)))
};

inline GeneratorOutput heatmap_generator_forward(const Tensor& feat, const WeightStore& w, const ModelConfig& cfg) {
    if (feat.rank() != 3 || feat.dim(1) != cfg.heatmap_size || feat.dim(2) != cfg.heatmap_size)
        throw ShapeError("generator expects [C," + std::to_string(cfg.heatmap_size) + "," +
                         std::to_string(cfg.heatmap_size) + "], got " + to_string(feat.shape()));
    GeneratorOutput g;
    g.maps.point = sigmoid(conv_layer(feat, w, "head.0.point"));
    g.maps.edge = sigmoid(conv_layer(feat, w, "head.0.edge"));
    const auto incidence = cfg.scheme.incidence();
    g.mask = mul(g.maps.point, e2p_transform(g.maps.edge, incidence, cfg.num_landmarks()));
    g.raw = relu(instance_norm(conv_layer(feat, w, "head.0.heatmap"), w.get("head.0.heatmap_norm.weight"),
                               w.get("head.0.heatmap_norm.bias"), cfg.norm_eps));
    g.attended = mul(g.raw, g.mask);
    Tensor r = g.attended;
    for (int i = 0; i < 3; ++i) r = conv_layer(r, w, "head.0.refine" + std::to_string(i));
    g.refined = add(g.attended, r);
    return g;
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

enum class NormalizeMode { sum, softmax };

struct DecodeOptions {
    NormalizeMode mode = NormalizeMode::sum;
    float eps = 1e-6f;  // sum mode: totals at or below this fall back to the grid centroid
    float tau = 1.0f;   // softmax temperature
    double stride = 4.0;
};

struct DecodeResult {
    LandmarkSet landmarks;
    std::vector<std::size_t> fallback_channels;  // channels decoded by the uniform fallback
};

/// Expected grid coordinate of each channel of [N,H,W] under its normalized distribution.
inline DecodeResult soft_argmax(const Tensor& heatmap, const DecodeOptions& opt = {}) {
    const detail::F32 h(heatmap);
    if (h->rank() != 3) throw ShapeError("soft_argmax expects [N,H,W]");
    const kernels::DecodeGrid grid{h->dim(1), h->dim(2), opt.stride};
    const std::size_t plane = grid.height * grid.width;
    DecodeResult r;
    for (std::size_t i = 0; i < h->dim(0); ++i) {
        const auto channel = h->values().subspan(i * plane, plane);
        for (float v : channel)
            if (!std::isfinite(v)) throw ArgumentError("soft_argmax: non-finite value in channel " + std::to_string(i));
        Point p;
        if (opt.mode == NormalizeMode::sum) {
            if (!kernels::soft_argmax_sum<float>(grid, channel, opt.eps, p.x, p.y)) r.fallback_channels.push_back(i);
        } else {
            kernels::soft_argmax_softmax<float>(grid, channel, opt.tau, p.x, p.y);
        }
        r.landmarks.points.push_back(p);
    }
    return r;
}

/// Channel-normalized copy (sum mode semantics) of a heatmap stack.
inline Tensor normalized(const Tensor& heatmap, float eps = 1e-6f) {
    Tensor out = heatmap.to_f32();
    const std::size_t c = out.dim(0), plane = out.numel() / c;
    auto v = out.mutable_values();
    for (std::size_t i = 0; i < c; ++i) {
        float total = 0;
        for (std::size_t k = 0; k < plane; ++k) total += std::max(v[i * plane + k], 0.0f);
        for (std::size_t k = 0; k < plane; ++k) {
            float& x = v[i * plane + k];
            x = total > eps ? std::max(x, 0.0f) / total : 1.0f / static_cast<float>(plane);
        }
    }
    return out;
}

struct Prediction {
    LandmarkSet landmarks;
    GeneratorOutput heads;
    std::vector<std::size_t> fallback_channels;
};

inline Prediction predict_full(const Tensor& image, const WeightStore& w, const ModelConfig& cfg,
                               DecodeOptions opt = {}) {
    const BackboneOutput bb = backbone_forward(image, w, cfg);
    const Tensor feat = upsample(bb.features(), cfg.heatmap_size, cfg.heatmap_size, cfg.upsample);
    Prediction p;
    p.heads = heatmap_generator_forward(feat, w, cfg);
    opt.stride = cfg.decode_stride();
    DecodeResult d = soft_argmax(p.heads.refined, opt);
    p.landmarks = std::move(d.landmarks);
    p.fallback_channels = std::move(d.fallback_channels);
    return p;
}

/// Image [3,S,S] -> N landmarks in input-pixel coordinates.
inline LandmarkSet predict(const Tensor& image, const WeightStore& w, const ModelConfig& cfg, DecodeOptions opt = {}) {
    return predict_full(image, w, cfg, opt).landmarks;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// He-normal conv weights, zero biases, unit norm scales. Deterministic in `seed`.
inline WeightStore random_weights(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    WeightStore store;
    for (const auto& p : parameter_specs(cfg)) {
        Tensor t(p.shape);
        auto v = t.mutable_values();
        switch (p.role) {
        case ParamRole::conv_weight: {
            const float fan_in = static_cast<float>(p.shape[1] * p.shape[2] * p.shape[3]);
            const float std_dev = std::sqrt(2.0f / fan_in);
            for (auto& x : v) x = normal(rng) * std_dev;
            break;
        }
        case ParamRole::norm_scale: std::fill(v.begin(), v.end(), 1.0f); break;
        case ParamRole::bias:
        case ParamRole::norm_shift: break;
        }
        store.add(p.name, std::move(t));
    }
    return store;
}

/// All-zero store with unit norm scales.
inline WeightStore zero_weights(const ModelConfig& cfg) {
    WeightStore store;
    for (const auto& p : parameter_specs(cfg))
        store.add(p.name, Tensor(p.shape, p.role == ParamRole::norm_scale ? 1.0f : 0.0f));
    return store;
}

} // namespace lmk
