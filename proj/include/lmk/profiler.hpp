#pragma once

// Static parameter and multiply-accumulate counts for the student graph.
// Walks the architecture from ModelConfig directly (not through the weight naming
// table) so the two can be cross-checked.

#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmk/config.hpp"

namespace lmk {

struct LayerCost {
    std::string name;
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
};

struct CostReport {
    std::vector<LayerCost> layers;

    std::uint64_t total_params() const {
        std::uint64_t n = 0;
        for (const auto& l : layers) n += l.params;
        return n;
    }
    std::uint64_t total_macs() const {
        std::uint64_t n = 0;
        for (const auto& l : layers) n += l.macs;
        return n;
    }
    double gflops() const { return 2.0 * static_cast<double>(total_macs()) / 1e9; }

    /// Totals grouped by the leading name component (stage0 .. stage5, head).
    std::map<std::string, LayerCost> by_stage() const {
        std::map<std::string, LayerCost> out;
        for (const auto& l : layers) {
            const std::string key = l.name.substr(0, l.name.find('.'));
            auto& s = out[key];
            s.name = key;
            s.params += l.params;
            s.macs += l.macs;
        }
        return out;
    }
};

namespace profile_detail {

class Walker {
public:
    explicit Walker(CostReport& r) : r_(r) {}

    void conv(const std::string& name, std::uint64_t cin, std::uint64_t cout, std::uint64_t k, std::uint64_t groups,
              bool bias, std::uint64_t out_hw) {
        const std::uint64_t w = cout * (cin / groups) * k * k;
        r_.layers.push_back({name, w + (bias ? cout : 0), w * out_hw * out_hw});
    }
    void norm(const std::string& name, std::uint64_t c) { r_.layers.push_back({name, 2 * c, 0}); }
    void macs(const std::string& name, std::uint64_t m) { r_.layers.push_back({name, 0, m}); }

private:
    CostReport& r_;
};

inline std::string at(std::size_t stage, std::size_t block) {
    return "stage" + std::to_string(stage) + "." + std::to_string(block) + ".";
}

inline void mv2(Walker& w, const std::string& p, std::uint64_t cin, std::uint64_t cout, std::uint64_t stride,
                std::uint64_t in_hw, std::uint64_t expansion) {
    const std::uint64_t hidden = cin * expansion, out_hw = in_hw / stride;
    w.conv(p + "expand", cin, hidden, 1, 1, false, in_hw);
    w.norm(p + "expand_norm", hidden);
    w.conv(p + "dw", hidden, hidden, 3, hidden, false, out_hw);
    w.norm(p + "dw_norm", hidden);
    w.conv(p + "project", hidden, cout, 1, 1, false, out_hw);
    w.norm(p + "project_norm", cout);
}

inline void mobilevit(Walker& w, const std::string& p, std::uint64_t c, std::uint64_t d, std::uint64_t depth,
                      std::uint64_t ffn_ratio, std::uint64_t hw) {
    w.conv(p + "local_dw", c, c, 3, c, false, hw);
    w.norm(p + "local_norm", c);
    w.conv(p + "local_pw", c, d, 1, 1, false, hw);
    // Tokens: every pixel of the map appears once as (patch pixel, patch) pair.
    for (std::uint64_t l = 0; l < depth; ++l) {
        const std::string a = p + "attn" + std::to_string(l), f = p + "ffn" + std::to_string(l);
        w.norm(a + "_norm", d);
        w.conv(a + "_qkv", d, 1 + 2 * d, 1, 1, true, hw);
        w.macs(a + "_context", d * hw * hw);
        w.conv(a + "_out", d, d, 1, 1, true, hw);
        w.norm(f + "_norm", d);
        w.conv(f + "_fc1", d, d * ffn_ratio, 1, 1, true, hw);
        w.conv(f + "_fc2", d * ffn_ratio, d, 1, 1, true, hw);
    }
    w.norm(p + "final_norm", d);
    w.conv(p + "proj", d, c, 1, 1, false, hw);
    w.norm(p + "proj_norm", c);
}

} // namespace profile_detail

/// Per-layer parameters and MACs at the configured input size. Convolutions cost
/// weight-count x output pixels; elementwise ops, norms and resampling cost 0 MACs.
inline CostReport profile(const ModelConfig& cfg) {
    using namespace profile_detail;
    CostReport r;
    Walker w(r);
    const auto ch = cfg.stage_channels();
    const auto dims = cfg.attention_dims();
    const std::uint64_t s = cfg.input_size;
    w.conv(at(0, 0) + "conv", 3, ch[0], 3, 1, false, s / 2);
    w.norm(at(0, 0) + "norm", ch[0]);
    mv2(w, at(1, 0), ch[0], ch[1], 1, s / 2, cfg.mv2_expansion);
    mv2(w, at(2, 0), ch[1], ch[2], 2, s / 2, cfg.mv2_expansion);
    for (std::size_t i = 0; i < cfg.stage2_repeats; ++i) mv2(w, at(2, i + 1), ch[2], ch[2], 1, s / 4, cfg.mv2_expansion);
    std::uint64_t hw = s / 4;
    for (std::size_t st = 3; st <= 5; ++st) {
        mv2(w, at(st, 0), ch[st - 1], ch[st], 2, hw, cfg.mv2_expansion);
        hw /= 2;
        mobilevit(w, at(st, 1), ch[st], dims[st - 3], cfg.attention_depth[st - 3], cfg.ffn_ratio, hw);
    }
    const std::uint64_t c = ch[5], n = cfg.num_landmarks(), e = cfg.num_edges(), h = cfg.heatmap_size;
    w.conv("head.0.point", c, n, cfg.point_kernel, 1, true, h);
    w.conv("head.0.edge", c, e, cfg.edge_kernel, 1, true, h);
    w.conv("head.0.heatmap", c, n, cfg.heatmap_kernel, 1, true, h);
    w.norm("head.0.heatmap_norm", n);
    for (int i = 0; i < 3; ++i) w.conv("head.0.refine" + std::to_string(i), n, n, cfg.refine_kernel, 1, true, h);
    return r;
}

inline CostReport count_params(const ModelConfig& cfg) { return profile(cfg); }
inline CostReport count_macs(const ModelConfig& cfg) { return profile(cfg); }

/// Fixed-width text table; byte-identical for identical configs.
inline std::string format_table(const CostReport& r) {
    std::ostringstream os;
    os << std::left << std::setw(34) << "layer" << std::right << std::setw(12) << "params" << std::setw(16) << "macs"
       << "\n";
    for (const auto& l : r.layers)
        os << std::left << std::setw(34) << l.name << std::right << std::setw(12) << l.params << std::setw(16) << l.macs
           << "\n";
    os << "\n" << std::left << std::setw(34) << "stage" << std::right << std::setw(12) << "params" << std::setw(16)
       << "macs" << "\n";
    for (const auto& [key, s] : r.by_stage())
        os << std::left << std::setw(34) << key << std::right << std::setw(12) << s.params << std::setw(16) << s.macs
           << "\n";
    os << "\n";
    os << "total params " << r.total_params() << " (" << std::fixed << std::setprecision(4)
       << static_cast<double>(r.total_params()) / 1e6 << " M)\n";
    os << "total macs   " << r.total_macs() << " (" << std::setprecision(3)
       << static_cast<double>(r.total_macs()) / 1e6 << " M)\n";
    os << "gflops       " << std::setprecision(4) << r.gflops() << "\n";
    return os.str();
}

inline nlohmann::json to_json(const CostReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : r.layers) layers.push_back({{"name", l.name}, {"params", l.params}, {"macs", l.macs}});
    return {{"layers", layers},
            {"totals", {{"params", r.total_params()}, {"macs", r.total_macs()}, {"gflops", r.gflops()}}}};
}

} // namespace lmk
