#pragma once

// Optimizer, finite-difference gradient check and the desk-scale distillation run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lmk/autodiff.hpp"
#include "lmk/config.hpp"
#include "lmk/error.hpp"
#include "lmk/losses.hpp"
#include "lmk/model.hpp"
#include "lmk/naming.hpp"
#include "lmk/weights.hpp"

namespace lmk {

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double lr_backbone = 2e-4;  // modeled for completeness; the toy run trains the head only
    double lr_head = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

struct OptimizerState {
    struct Moments {
        std::vector<double> m, v;
    };
    AdamWConfig config;
    std::uint64_t step = 0;
    std::map<std::string, Moments> moments;

    double learning_rate(const std::string& name) const {
        return name.rfind("head.", 0) == 0 ? config.lr_head : config.lr_backbone;
    }
};

/// One decoupled-weight-decay Adam step over every tensor named in `grads`.
/// Non-finite gradients refuse the whole step before anything is modified.
inline void adamw_step(WeightStore& params, const WeightStore& grads, OptimizerState& state) {
    for (const auto& g : grads.entries()) {
        const Tensor& p = params.get(g.name);
        if (p.shape() != g.tensor.shape())
            throw ShapeError("adamw: gradient of '" + g.name + "' is " + to_string(g.tensor.shape()) + ", parameter is " +
                             to_string(p.shape()));
        const detail::F32 gv(g.tensor);
        for (float x : gv->values())
            if (!std::isfinite(x)) throw ArgumentError("adamw: non-finite gradient for '" + g.name + "', step refused");
    }
    const AdamWConfig& c = state.config;
    const auto t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(c.beta1, t), bc2 = 1.0 - std::pow(c.beta2, t);
    for (const auto& g : grads.entries()) {
        Tensor p = params.get(g.name).to_f32();
        const detail::F32 gv(g.tensor);
        auto& mom = state.moments[g.name];
        if (mom.m.empty()) {
            mom.m.assign(p.numel(), 0.0);
            mom.v.assign(p.numel(), 0.0);
        }
        const double lr = state.learning_rate(g.name);
        auto pv = p.mutable_values();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double gi = gv->values()[i];
            double x = static_cast<double>(pv[i]) * (1.0 - lr * c.weight_decay);
            mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
            mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
            x -= lr * (mom.m[i] / bc1) / (std::sqrt(mom.v[i] / bc2) + c.eps);
            pv[i] = static_cast<float>(x);
        }
        params.set(g.name, std::move(p));
    }
    ++state.step;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Miniature head used by the gradient check: N=3 landmarks, E=2 edges, 8x8 heatmaps.
inline ModelConfig gradcheck_config() {
    ModelConfig cfg = ModelConfig::miniature(3, 2);
    cfg.input_size = 32;
    cfg.heatmap_size = 8;
    return cfg;
}

struct GradCheckProblem {
    ModelConfig cfg;
    WeightStore weights;  // head.* only
    Tensor features;      // [C,H,W]
    Tensor teacher;       // [N,H,W]
    Tensor target;        // [N,2]
    double kd_weight = 1.0;
    double reg_weight = 0.01;
};

/// Random head problem; biases and norm shifts are random too so no parameter sits at a special point.
inline GradCheckProblem make_gradcheck_problem(std::uint64_t seed, std::size_t channels = 8) {
    GradCheckProblem p;
    p.cfg = gradcheck_config();
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    for (const auto& spec : head_parameter_specs(p.cfg, channels)) {
        Tensor t(spec.shape);
        for (auto& x : t.mutable_values()) {
            switch (spec.role) {
            case ParamRole::conv_weight: x = 0.5f * normal(rng) * std::sqrt(2.0f / static_cast<float>(spec.shape[1])); break;
            case ParamRole::norm_scale: x = 1.0f + 0.2f * normal(rng); break;
            default: x = 0.3f * normal(rng); break;
            }
        }
        p.weights.add(spec.name, std::move(t));
    }
    // Positive output bias keeps every channel's clipped mass well above the decode
    // fallback threshold, where the sum normalization is smooth and well-conditioned.
    {
        Tensor b = p.weights.get("head.0.refine2.bias");
        for (auto& x : b.mutable_values()) x = 1.0f + std::abs(x);
        p.weights.set("head.0.refine2.bias", std::move(b));
    }
    const std::size_t h = p.cfg.heatmap_size, n = p.cfg.num_landmarks();
    p.features = Tensor({channels, h, h});
    for (auto& x : p.features.mutable_values()) x = normal(rng);
    p.teacher = Tensor({n, h, h});
    for (auto& x : p.teacher.mutable_values()) x = unit(rng);
    p.target = Tensor({n, 2});
    for (auto& x : p.target.mutable_values()) x = unit(rng) * static_cast<float>(p.cfg.input_size);
    return p;
}

struct GradCheckReport {
    double max_rel_error = 0;          // max over parameter tensors
    std::string worst_parameter;
    double max_element_rel_error = 0;  // diagnostic: worst single element
    std::size_t checked = 0;           // elements compared
    std::size_t skipped = 0;           // perturbation crossed a relu / clip kink
    bool passed(double tol) const { return checked > 0 && max_rel_error < tol; }
};

/// Analytic gradients from a Tape<T> against central differences (step h) of a float64 tape.
///
/// Per parameter tensor, relative error is ||a - n|| / max(||a||, ||n||, floor) over the
/// elements whose +-h perturbations stay on the same side of every kink. The floor is 1e-7
/// plus 100 ulp of T times the largest gradient norm, so a structurally-zero gradient (a
/// bias feeding an instance norm) is compared against T's rounding level.
template <class T>
GradCheckReport gradient_check(const GradCheckProblem& p, double h = 1e-3) {
    Tape<T> analytic;
    const auto a = record_head_loss<T>(analytic, p.weights, p.features, p.teacher, p.target, p.cfg,
                                       static_cast<T>(p.kd_weight), static_cast<T>(p.reg_weight));
    analytic.backward(a.total);
    double max_norm = 0;
    for (const auto& name : analytic.parameter_names()) {
        double sq = 0;
        for (T g : analytic.gradient(analytic.param(name))) sq += static_cast<double>(g) * static_cast<double>(g);
        max_norm = std::max(max_norm, std::sqrt(sq));
    }
    const double floor = 1e-7 + 100.0 * static_cast<double>(std::numeric_limits<T>::epsilon()) * max_norm;

    Tape<double> fd;
    const auto f = record_head_loss<double>(fd, p.weights, p.features, p.teacher, p.target, p.cfg, p.kd_weight,
                                            p.reg_weight);
    const auto base_signature = fd.kink_signature();

    GradCheckReport r;
    for (const auto& name : fd.parameter_names()) {
        const auto id = fd.param(name);
        const std::vector<double> base = fd.value(id);
        const auto& g = analytic.gradient(analytic.param(name));
        double diff_sq = 0, an_sq = 0, num_sq = 0;
        for (std::size_t i = 0; i < base.size(); ++i) {
            bool same_piece = true;
            auto eval = [&](double delta) {
                std::vector<double> v = base;
                v[i] += delta;
                fd.set_value(id, std::move(v));
                fd.replay();
                same_piece = same_piece && fd.kink_signature() == base_signature;
                return fd.value(f.total)[0];
            };
            const double up = eval(h), down = eval(-h);
            if (!same_piece) {
                ++r.skipped;
                continue;
            }
            const double numeric = (up - down) / (2 * h);
            const double an = static_cast<double>(g[i]);
            diff_sq += (an - numeric) * (an - numeric);
            an_sq += an * an;
            num_sq += numeric * numeric;
            r.max_element_rel_error = std::max(
                r.max_element_rel_error, std::abs(an - numeric) / std::max({std::abs(an), std::abs(numeric), floor}));
            ++r.checked;
        }
        fd.set_value(id, base);
        const double rel = std::sqrt(diff_sq) / std::max({std::sqrt(an_sq), std::sqrt(num_sq), floor});
        if (rel > r.max_rel_error || r.worst_parameter.empty()) {
            r.max_rel_error = rel;
            r.worst_parameter = name;
        }
    }
    fd.replay();
    return r;
}

// ---------------------------------------------------------------------------
// Toy distillation
// ---------------------------------------------------------------------------

struct ToyDistillConfig {
    ModelConfig model = ModelConfig::miniature();
    std::size_t samples = 32;
    std::size_t batch = 16;
    double teacher_sigma = 1.5;  // heatmap cells
    float max_shift = 6.0f;      // input pixels
    LossWeights weights{1.0f, 0.01f};
    AdamWConfig optimizer;
};

struct ToySample {
    Tensor image;      // [3,S,S]
    Tensor teacher;    // [N,H,W]
    LandmarkSet landmarks;
};

/// Gaussian of peak 1 centred on each landmark, in heatmap-cell units.
inline Tensor render_gaussians(const LandmarkSet& lms, std::size_t size, double stride, double sigma) {
    Tensor out({lms.size(), size, size});
    auto v = out.mutable_values();
    for (std::size_t i = 0; i < lms.size(); ++i) {
        const double cx = lms.points[i].x / stride - 0.5, cy = lms.points[i].y / stride - 0.5;
        for (std::size_t r = 0; r < size; ++r)
            for (std::size_t c = 0; c < size; ++c) {
                const double d2 = (static_cast<double>(c) - cx) * (static_cast<double>(c) - cx) +
                                  (static_cast<double>(r) - cy) * (static_cast<double>(r) - cy);
                v[(i * size + r) * size + c] = static_cast<float>(std::exp(-d2 / (2 * sigma * sigma)));
            }
    }
    return out;
}

/// Fixed synthetic dataset: a landmark template, shifted per sample, drawn as colored blobs.
inline std::vector<ToySample> make_toy_dataset(const ToyDistillConfig& c, std::uint64_t seed) {
    const std::size_t s = c.model.input_size, n = c.model.num_landmarks();
    const double stride = c.model.decode_stride();
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<float> shift(-c.max_shift, c.max_shift);
    std::vector<ToySample> out;
    for (std::size_t k = 0; k < c.samples; ++k) {
        const float dx = shift(rng), dy = shift(rng);
        ToySample sample;
        for (std::size_t i = 0; i < n; ++i) {
            const double angle = 2.0 * 3.14159265358979323846 * static_cast<double>(i) / static_cast<double>(n);
            const float radius = 0.25f * static_cast<float>(s);
            sample.landmarks.points.push_back({0.5f * static_cast<float>(s) + radius * static_cast<float>(std::cos(angle)) + dx,
                                               0.5f * static_cast<float>(s) + radius * static_cast<float>(std::sin(angle)) + dy});
        }
        sample.image = Tensor({3, s, s});
        auto img = sample.image.mutable_values();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& p = sample.landmarks.points[i];
            for (std::size_t r = 0; r < s; ++r)
                for (std::size_t col = 0; col < s; ++col) {
                    const float ddx = static_cast<float>(col) + 0.5f - static_cast<float>(p.x),
                                ddy = static_cast<float>(r) + 0.5f - static_cast<float>(p.y);
                    const float blob = std::exp(-(ddx * ddx + ddy * ddy) / 18.0f);
                    img[((i % 3) * s + r) * s + col] += blob;
                }
        }
        sample.teacher = render_gaussians(sample.landmarks, c.model.heatmap_size, stride, c.teacher_sigma);
        out.push_back(std::move(sample));
    }
    return out;
}

inline Tensor landmarks_tensor(const LandmarkSet& lms) {
    Tensor t({lms.size(), 2});
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < lms.size(); ++i) {
        v[2 * i] = lms.points[i].x;
        v[2 * i + 1] = lms.points[i].y;
    }
    return t;
}

/// Trains the generator head of a frozen random backbone on the synthetic dataset.
/// Entry k of the result is the batch-mean loss evaluated before update k.
inline std::vector<LossReport> toy_distill_run(const ToyDistillConfig& c, std::size_t steps, std::uint64_t seed) {
    c.model.validate();
    if (c.batch == 0 || c.batch > c.samples) throw ArgumentError("batch must be in [1, samples]");
    std::vector<LossReport> trajectory;
    if (steps == 0) return trajectory;

    const WeightStore all = random_weights(c.model, seed);
    WeightStore head;
    for (const auto& e : all.entries())
        if (e.name.rfind("head.", 0) == 0) head.add(e.name, e.tensor);

    const auto data = make_toy_dataset(c, seed);
    std::vector<std::unique_ptr<Tape<float>>> tapes;
    std::vector<HeadLossNodes> nodes;
    for (const auto& sample : data) {
        const BackboneOutput bb = backbone_forward(sample.image, all, c.model);
        const Tensor feat = upsample(bb.features(), c.model.heatmap_size, c.model.heatmap_size, c.model.upsample);
        tapes.push_back(std::make_unique<Tape<float>>());
        nodes.push_back(record_head_loss<float>(*tapes.back(), head, feat, sample.teacher,
                                                landmarks_tensor(sample.landmarks), c.model, c.weights.kd,
                                                c.weights.reg));
    }

    OptimizerState opt;
    opt.config = c.optimizer;
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(c.samples);
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = c.samples;

    for (std::size_t step = 0; step < steps; ++step) {
        std::vector<std::size_t> batch;
        while (batch.size() < c.batch) {
            if (cursor == c.samples) {
                // Fisher-Yates with an explicit modulo draw keeps the order identical across standard libraries.
                for (std::size_t i = c.samples - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }

        std::map<std::string, std::vector<float>> grad;
        for (const auto& e : head.entries()) grad[e.name].assign(e.tensor.numel(), 0.0f);
        double kd = 0, reg = 0;
        for (std::size_t k : batch) {
            Tape<float>& tape = *tapes[k];
            for (const auto& e : head.entries()) {
                const auto v = e.tensor.values();
                tape.set_value(tape.param(e.name), std::vector<float>(v.begin(), v.end()));
            }
            tape.replay();
            tape.backward(nodes[k].total);
            kd += tape.value(nodes[k].kd)[0];
            reg += tape.value(nodes[k].reg)[0];
            for (auto& [name, g] : grad) {
                const auto& src = tape.gradient(tape.param(name));
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
            }
        }
        const float inv = 1.0f / static_cast<float>(batch.size());
        const LossReport report = combine(static_cast<float>(kd) * inv, static_cast<float>(reg) * inv, c.weights);
        if (!std::isfinite(report.total))
            throw DivergenceError("toy distillation diverged at step " + std::to_string(step), static_cast<long>(step));
        trajectory.push_back(report);

        WeightStore grads;
        for (auto& [name, g] : grad) {
            for (auto& x : g) x *= inv;
            grads.add(name, Tensor(head.get(name).shape(), std::move(g)));
        }
        adamw_step(head, grads, opt);
    }
    return trajectory;
}

} // namespace lmk
