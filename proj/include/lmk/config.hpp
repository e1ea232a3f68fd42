#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmk/error.hpp"
#include "lmk/ops.hpp"

namespace lmk {

enum class Activation { silu, relu };
enum class NormKind { affine, instance };

/// Landmark -> edge incidence and the left/right relabeling used by horizontal flips.
struct LandmarkScheme {
    std::size_t num_landmarks = 0;
    std::size_t num_edges = 0;
    std::vector<std::vector<std::size_t>> edges;  // landmark indices on each edge
    std::vector<std::size_t> flip_permutation;    // empty when no flip mapping is known

    /// Row-major [landmark][edge] 0/1 matrix.
    std::vector<unsigned char> incidence() const {
        std::vector<unsigned char> a(num_landmarks * num_edges, 0);
        for (std::size_t e = 0; e < edges.size(); ++e)
            for (std::size_t i : edges[e]) a[i * num_edges + e] = 1;
        return a;
    }

    void validate() const {
        if (num_landmarks == 0 || num_edges == 0) throw ArgumentError("landmark scheme needs N >= 1 and E >= 1");
        if (edges.size() != num_edges)
            throw ArgumentError("landmark scheme lists " + std::to_string(edges.size()) + " edges, expected " +
                                std::to_string(num_edges));
        for (const auto& e : edges)
            for (std::size_t i : e)
                if (i >= num_landmarks) throw ArgumentError("edge references landmark " + std::to_string(i));
        const auto a = incidence();
        for (std::size_t i = 0; i < num_landmarks; ++i) {
            bool any = false;
            for (std::size_t e = 0; e < num_edges; ++e) any = any || a[i * num_edges + e];
            if (!any) throw ArgumentError("landmark " + std::to_string(i) + " has no incident edge");
        }
        if (!flip_permutation.empty()) {
            if (flip_permutation.size() != num_landmarks) throw ArgumentError("flip permutation has wrong length");
            for (std::size_t i = 0; i < num_landmarks; ++i) {
                const std::size_t j = flip_permutation[i];
                if (j >= num_landmarks || flip_permutation[j] != i)
                    throw ArgumentError("flip permutation is not an involution at index " + std::to_string(i));
            }
        }
    }

    /// 51 inner-face points (68-point layout without the jaw line): brows 0-9, nose 10-18,
    /// eyes 19-30, mouth 31-50, grouped into eight boundaries.
    static LandmarkScheme face51() {
        LandmarkScheme s;
        s.num_landmarks = 51;
        s.num_edges = 8;
        auto range = [](std::size_t a, std::size_t b) {
            std::vector<std::size_t> v;
            for (std::size_t i = a; i <= b; ++i) v.push_back(i);
            return v;
        };
        s.edges = {range(0, 4),   range(5, 9),   range(10, 13), range(14, 18),
                   range(19, 24), range(25, 30), range(31, 42), range(43, 50)};
        s.flip_permutation.resize(51);
        for (std::size_t i = 0; i < 51; ++i) s.flip_permutation[i] = i;
        const std::array<std::array<std::size_t, 2>, 22> pairs{{{0, 9},   {1, 8},   {2, 7},   {3, 6},   {4, 5},
                                                                  {14, 18}, {15, 17}, {19, 28}, {20, 27}, {21, 26},
                                                                  {22, 25}, {23, 30}, {24, 29}, {31, 37}, {32, 36},
                                                                  {33, 35}, {38, 42}, {39, 41}, {43, 47}, {44, 46},
                                                                  {48, 50}, {45, 45}}};
        for (const auto& p : pairs) {
            s.flip_permutation[p[0]] = p[1];
            s.flip_permutation[p[1]] = p[0];
        }
        return s;
    }
};

/// Architecture hyperparameters of the student network.
struct ModelConfig {
    float alpha = 0.5f;
    std::size_t input_size = 256;
    std::size_t heatmap_size = 64;
    std::size_t patch = 2;
    std::size_t mv2_expansion = 2;
    std::size_t ffn_ratio = 2;
    std::size_t stage2_repeats = 1;  // stride-1 MV2 blocks after the stage-2 downsample
    std::array<std::size_t, 3> attention_depth{2, 4, 3};
    Activation activation = Activation::silu;
    NormKind backbone_norm = NormKind::affine;
    UpsampleMode upsample = UpsampleMode::bilinear;
    std::size_t point_kernel = 1;
    std::size_t edge_kernel = 1;
    std::size_t heatmap_kernel = 1;
    std::size_t refine_kernel = 1;
    float norm_eps = 1e-5f;
    LandmarkScheme scheme = LandmarkScheme::face51();

    std::size_t num_landmarks() const { return scheme.num_landmarks; }
    std::size_t num_edges() const { return scheme.num_edges; }

    /// alpha * base rounded to the nearest even integer, at least 2.
    std::size_t scaled(std::size_t base) const {
        const double v = static_cast<double>(alpha) * static_cast<double>(base);
        const auto even = static_cast<std::size_t>(std::llround(v / 2.0)) * 2;
        return even < 2 ? 2 : even;
    }

    /// Output channels of backbone stages 0..5 (32a, 64a, 128a, 256a, 384a, 512a).
    std::array<std::size_t, 6> stage_channels() const {
        return {scaled(32), scaled(64), scaled(128), scaled(256), scaled(384), scaled(512)};
    }

    /// Attention width d of the three transformer stages (128a, 192a, 256a).
    std::array<std::size_t, 3> attention_dims() const { return {scaled(128), scaled(192), scaled(256)}; }

    /// Spatial extent of stage i's output (stages 0..5).
    std::size_t stage_extent(std::size_t stage) const {
        static constexpr std::array<std::size_t, 6> stride{2, 2, 4, 8, 16, 32};
        return input_size / stride[stage];
    }

    std::size_t feature_channels() const { return stage_channels()[5]; }
    double decode_stride() const { return static_cast<double>(input_size) / static_cast<double>(heatmap_size); }

    void validate() const {
        if (!(alpha > 0)) throw ArgumentError("alpha must be positive");
        if (input_size == 0 || input_size % 32 != 0) throw ArgumentError("input size must be a positive multiple of 32");
        if (patch == 0 || stage_extent(5) % patch != 0)
            throw ArgumentError("final stage extent " + std::to_string(stage_extent(5)) + " not divisible by patch " +
                                std::to_string(patch));
        if (heatmap_size < stage_extent(5) || heatmap_size > input_size || input_size % heatmap_size != 0)
            throw ArgumentError("heatmap size must divide the input size and be >= the final stage extent");
        for (std::size_t k : {point_kernel, edge_kernel, heatmap_kernel, refine_kernel})
            if (k % 2 == 0) throw ArgumentError("generator kernels must be odd");
        if (mv2_expansion == 0 || ffn_ratio == 0) throw ArgumentError("expansion ratios must be >= 1");
        scheme.validate();
    }

    /// Width-0.5 student at 256x256 input, 51 landmarks, 8 edges.
    static ModelConfig student() { return {}; }

    /// Miniature network for desk-scale training runs: 64x64 input, 16x16 heatmaps.
    static ModelConfig miniature(std::size_t landmarks = 5, std::size_t edges = 2) {
        ModelConfig c;
        c.alpha = 0.25f;
        c.input_size = 64;
        c.heatmap_size = 16;
        c.attention_depth = {1, 1, 1};
        c.scheme.num_landmarks = landmarks;
        c.scheme.num_edges = edges;
        c.scheme.edges.assign(edges, {});
        for (std::size_t i = 0; i < landmarks; ++i) c.scheme.edges[i % edges].push_back(i);
        c.scheme.flip_permutation.clear();
        return c;
    }
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::silu, "silu"}, {Activation::relu, "relu"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NormKind, {{NormKind::affine, "affine"}, {NormKind::instance, "instance"}})
NLOHMANN_JSON_SERIALIZE_ENUM(UpsampleMode, {{UpsampleMode::nearest, "nearest"}, {UpsampleMode::bilinear, "bilinear"}})

inline void to_json(nlohmann::json& j, const LandmarkScheme& s) {
    j = {{"num_landmarks", s.num_landmarks},
         {"num_edges", s.num_edges},
         {"edges", s.edges},
         {"flip_permutation", s.flip_permutation}};
}

inline void from_json(const nlohmann::json& j, LandmarkScheme& s) {
    j.at("num_landmarks").get_to(s.num_landmarks);
    j.at("num_edges").get_to(s.num_edges);
    j.at("edges").get_to(s.edges);
    s.flip_permutation = j.value("flip_permutation", std::vector<std::size_t>{});
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"alpha", c.alpha},
         {"input_size", c.input_size},
         {"heatmap_size", c.heatmap_size},
         {"patch", c.patch},
         {"mv2_expansion", c.mv2_expansion},
         {"ffn_ratio", c.ffn_ratio},
         {"stage2_repeats", c.stage2_repeats},
         {"attention_depth", c.attention_depth},
         {"activation", c.activation},
         {"backbone_norm", c.backbone_norm},
         {"upsample", c.upsample},
         {"point_kernel", c.point_kernel},
         {"edge_kernel", c.edge_kernel},
         {"heatmap_kernel", c.heatmap_kernel},
         {"refine_kernel", c.refine_kernel},
         {"norm_eps", c.norm_eps},
         {"scheme", c.scheme}};
}

/// Missing keys keep their defaults, so a file may override only the landmark scheme.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    const ModelConfig d;
    c.alpha = j.value("alpha", d.alpha);
    c.input_size = j.value("input_size", d.input_size);
    c.heatmap_size = j.value("heatmap_size", d.heatmap_size);
    c.patch = j.value("patch", d.patch);
    c.mv2_expansion = j.value("mv2_expansion", d.mv2_expansion);
    c.ffn_ratio = j.value("ffn_ratio", d.ffn_ratio);
    c.stage2_repeats = j.value("stage2_repeats", d.stage2_repeats);
    c.attention_depth = j.value("attention_depth", d.attention_depth);
    c.activation = j.value("activation", d.activation);
    c.backbone_norm = j.value("backbone_norm", d.backbone_norm);
    c.upsample = j.value("upsample", d.upsample);
    c.point_kernel = j.value("point_kernel", d.point_kernel);
    c.edge_kernel = j.value("edge_kernel", d.edge_kernel);
    c.heatmap_kernel = j.value("heatmap_kernel", d.heatmap_kernel);
    c.refine_kernel = j.value("refine_kernel", d.refine_kernel);
    c.norm_eps = j.value("norm_eps", d.norm_eps);
    c.scheme = j.contains("scheme") ? j.at("scheme").get<LandmarkScheme>() : d.scheme;
}

inline ModelConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    try {
        ModelConfig c = nlohmann::json::parse(in).get<ModelConfig>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config " + path + ": " + e.what());
    }
}

} // namespace lmk
