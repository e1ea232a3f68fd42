#pragma once

// Canonical parameter names: `stage{i}.{block}.{layer}.{param}` for the backbone and
// `head.0.{layer}.{param}` for the heatmap generator. Conv weights are
// [Cout, Cin/groups, kH, kW]; biases and norm parameters are [C].

#include <cstddef>
#include <string>
#include <vector>

#include "lmk/config.hpp"
#include "lmk/tensor.hpp"

namespace lmk {

enum class ParamRole { conv_weight, bias, norm_scale, norm_shift };

struct ParamSpec {
    std::string name;
    Shape shape;
    ParamRole role;

    bool is_head() const { return name.rfind("head.", 0) == 0; }
};

namespace naming {

inline std::string prefix(std::size_t stage, std::size_t block) {
    return "stage" + std::to_string(stage) + "." + std::to_string(block) + ".";
}

inline void conv(std::vector<ParamSpec>& out, const std::string& layer, std::size_t cout, std::size_t cin_per_group,
                 std::size_t k, bool bias) {
    out.push_back({layer + ".weight", {cout, cin_per_group, k, k}, ParamRole::conv_weight});
    if (bias) out.push_back({layer + ".bias", {cout}, ParamRole::bias});
}

inline void norm(std::vector<ParamSpec>& out, const std::string& layer, std::size_t c) {
    out.push_back({layer + ".weight", {c}, ParamRole::norm_scale});
    out.push_back({layer + ".bias", {c}, ParamRole::norm_shift});
}

inline void mv2(std::vector<ParamSpec>& out, const std::string& p, std::size_t cin, std::size_t cout,
                std::size_t expansion) {
    const std::size_t hidden = cin * expansion;
    conv(out, p + "expand", hidden, cin, 1, false);
    norm(out, p + "expand_norm", hidden);
    conv(out, p + "dw", hidden, 1, 3, false);
    norm(out, p + "dw_norm", hidden);
    conv(out, p + "project", cout, hidden, 1, false);
    norm(out, p + "project_norm", cout);
}

inline void mobilevit(std::vector<ParamSpec>& out, const std::string& p, std::size_t c, std::size_t d,
                      std::size_t depth, std::size_t ffn_ratio) {
    conv(out, p + "local_dw", c, 1, 3, false);
    norm(out, p + "local_norm", c);
    conv(out, p + "local_pw", d, c, 1, false);
    for (std::size_t l = 0; l < depth; ++l) {
        const std::string a = p + "attn" + std::to_string(l), f = p + "ffn" + std::to_string(l);
        norm(out, a + "_norm", d);
        conv(out, a + "_qkv", 1 + 2 * d, d, 1, true);
        conv(out, a + "_out", d, d, 1, true);
        norm(out, f + "_norm", d);
        conv(out, f + "_fc1", d * ffn_ratio, d, 1, true);
        conv(out, f + "_fc2", d, d * ffn_ratio, 1, true);
    }
    norm(out, p + "final_norm", d);
    conv(out, p + "proj", c, d, 1, false);
    norm(out, p + "proj_norm", c);
}

} // namespace naming

/// Heatmap generator parameters for a feature map with `channels` channels.
inline std::vector<ParamSpec> head_parameter_specs(const ModelConfig& cfg, std::size_t channels) {
    using namespace naming;
    std::vector<ParamSpec> out;
    const std::size_t n = cfg.num_landmarks(), e = cfg.num_edges();
    conv(out, "head.0.point", n, channels, cfg.point_kernel, true);
    conv(out, "head.0.edge", e, channels, cfg.edge_kernel, true);
    conv(out, "head.0.heatmap", n, channels, cfg.heatmap_kernel, true);
    norm(out, "head.0.heatmap_norm", n);
    for (std::size_t r = 0; r < 3; ++r) conv(out, "head.0.refine" + std::to_string(r), n, n, cfg.refine_kernel, true);
    return out;
}

/// Every parameter of the network in canonical order.
inline std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
    using namespace naming;
    std::vector<ParamSpec> out;
    const auto ch = cfg.stage_channels();
    const auto dims = cfg.attention_dims();
    conv(out, prefix(0, 0) + "conv", ch[0], 3, 3, false);
    norm(out, prefix(0, 0) + "norm", ch[0]);
    mv2(out, prefix(1, 0), ch[0], ch[1], cfg.mv2_expansion);
    mv2(out, prefix(2, 0), ch[1], ch[2], cfg.mv2_expansion);
    for (std::size_t r = 0; r < cfg.stage2_repeats; ++r) mv2(out, prefix(2, r + 1), ch[2], ch[2], cfg.mv2_expansion);
    for (std::size_t s = 3; s <= 5; ++s) {
        mv2(out, prefix(s, 0), ch[s - 1], ch[s], cfg.mv2_expansion);
        mobilevit(out, prefix(s, 1), ch[s], dims[s - 3], cfg.attention_depth[s - 3], cfg.ffn_ratio);
    }
    const auto head = head_parameter_specs(cfg, ch[5]);
    out.insert(out.end(), head.begin(), head.end());
    return out;
}

} // namespace lmk
