#pragma once

// Reverse-mode gradients for the heatmap generator and the training losses.
//
// A Tape records nodes in creation order. Each node keeps its value, a forward
// closure (used by replay()) and a backward closure. The op set is closed: conv2d,
// instance_norm, sigmoid, relu, elementwise mul/add, e2p, soft-argmax (sum mode),
// kd_loss, l2 regression loss and weighted sums.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lmk/config.hpp"
#include "lmk/error.hpp"
#include "lmk/kernels.hpp"
#include "lmk/ops.hpp"
#include "lmk/tensor.hpp"
#include "lmk/weights.hpp"

namespace lmk {

template <class T>
class Tape {
public:
    using Id = std::size_t;

    Tape() = default;
    // Closures capture `this`; a tape is pinned in place once built.
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Id parameter(const std::string& name, Shape shape, std::vector<T> values) {
        const Id id = leaf(std::move(shape), std::move(values), "parameter");
        params_.emplace(name, id);
        param_order_.push_back(name);
        return id;
    }

    Id constant(Shape shape, std::vector<T> values) { return leaf(std::move(shape), std::move(values), "constant"); }

    Id constant(const Tensor& t) {
        const Tensor f = t.to_f32();
        return constant(f.shape(), std::vector<T>(f.values().begin(), f.values().end()));
    }

    Id conv2d(Id x, Id weight, Id bias, const Conv2dOptions& opt) {
        const auto g = conv_geometry(nodes_[x].shape, nodes_[weight].shape, opt);
        if (nodes_[bias].shape != Shape{g.c_out}) throw ShapeError("tape conv2d: bias must be [Cout]");
        const Id y = node({g.c_out, g.out_h(), g.out_w()}, "conv2d");
        nodes_[y].forward = [this, g, x, weight, bias, y] {
            kernels::conv2d_forward<T>(g, val(x), val(weight), val(bias), mut(y));
        };
        nodes_[y].backward = [this, g, x, weight, bias, y] {
            kernels::conv2d_backward<T>(g, val(x), val(weight), gradv(y), grad(x), grad(weight), grad(bias));
        };
        nodes_[y].forward();
        return y;
    }

    Id instance_norm(Id x, Id gamma, Id beta, T eps) {
        const Shape s = nodes_[x].shape;
        const std::size_t c = s[0], plane = shape_numel(s) / c;
        const Id y = node(s, "instance_norm");
        nodes_[y].forward = [=, this] { kernels::instance_norm_forward<T>(c, plane, val(x), val(gamma), val(beta), eps, mut(y)); };
        nodes_[y].backward = [=, this] {
            kernels::instance_norm_backward<T>(c, plane, val(x), val(gamma), eps, gradv(y), grad(x), grad(gamma), grad(beta));
        };
        nodes_[y].forward();
        return y;
    }

    Id sigmoid(Id x) {
        const Id y = node(nodes_[x].shape, "sigmoid");
        nodes_[y].forward = [=, this] {
            auto in = val(x);
            auto out = mut(y);
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = kernels::sigmoid<T>(in[i]);
        };
        nodes_[y].backward = [=, this] {
            auto out = val(y);
            auto gy = gradv(y);
            auto gx = grad(x);
            for (std::size_t i = 0; i < out.size(); ++i) gx[i] += gy[i] * out[i] * (T(1) - out[i]);
        };
        nodes_[y].forward();
        return y;
    }

    Id relu(Id x) {
        const Id y = node(nodes_[x].shape, "relu");
        nodes_[y].kink_source = x;
        nodes_[y].forward = [=, this] {
            auto in = val(x);
            auto out = mut(y);
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = kernels::relu<T>(in[i]);
        };
        nodes_[y].backward = [=, this] {
            auto in = val(x);
            auto gy = gradv(y);
            auto gx = grad(x);
            for (std::size_t i = 0; i < in.size(); ++i)
                if (in[i] > T(0)) gx[i] += gy[i];
        };
        nodes_[y].forward();
        return y;
    }

    Id mul(Id a, Id b) {
        same_shape(a, b, "mul");
        const Id y = node(nodes_[a].shape, "mul");
        nodes_[y].forward = [=, this] {
            auto va = val(a), vb = val(b);
            auto out = mut(y);
            for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i];
        };
        nodes_[y].backward = [=, this] {
            auto va = val(a), vb = val(b);
            auto gy = gradv(y);
            auto ga = grad(a), gb = grad(b);
            for (std::size_t i = 0; i < va.size(); ++i) {
                ga[i] += gy[i] * vb[i];
                gb[i] += gy[i] * va[i];
            }
        };
        nodes_[y].forward();
        return y;
    }

    Id add(Id a, Id b) {
        same_shape(a, b, "add");
        const Id y = node(nodes_[a].shape, "add");
        nodes_[y].forward = [=, this] {
            auto va = val(a), vb = val(b);
            auto out = mut(y);
            for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i];
        };
        nodes_[y].backward = [=, this] {
            auto gy = gradv(y);
            auto ga = grad(a), gb = grad(b);
            for (std::size_t i = 0; i < gy.size(); ++i) {
                ga[i] += gy[i];
                gb[i] += gy[i];
            }
        };
        nodes_[y].forward();
        return y;
    }

    Id e2p(Id edge, std::vector<unsigned char> incidence, std::size_t points) {
        const Shape s = nodes_[edge].shape;
        const std::size_t edges = s[0], plane = s[1] * s[2];
        if (incidence.size() != points * edges) throw ShapeError("tape e2p: incidence must be N x E");
        const Id y = node({points, s[1], s[2]}, "e2p");
        nodes_[y].forward = [=, this] { kernels::e2p_forward<T>(points, edges, plane, incidence, val(edge), mut(y)); };
        nodes_[y].backward = [=, this] {
            kernels::e2p_backward<T>(points, edges, plane, incidence, val(edge), gradv(y), grad(edge));
        };
        nodes_[y].forward();
        return y;
    }

    /// Sum-mode soft-argmax of [N,H,W] -> [N,2] (x, y).
    Id soft_argmax(Id heat, double stride, T eps) {
        const Shape s = nodes_[heat].shape;
        if (s.size() != 3) throw ShapeError("tape soft_argmax expects [N,H,W]");
        const kernels::DecodeGrid grid{s[1], s[2], stride};
        const std::size_t n = s[0], plane = s[1] * s[2];
        const Id y = node({n, 2}, "soft_argmax");
        nodes_[y].kink_source = heat;
        nodes_[y].forward = [=, this] {
            auto h = val(heat);
            auto out = mut(y);
            for (std::size_t i = 0; i < n; ++i)
                kernels::soft_argmax_sum<T>(grid, h.subspan(i * plane, plane), eps, out[2 * i], out[2 * i + 1]);
        };
        nodes_[y].backward = [=, this] {
            auto h = val(heat);
            auto gy = gradv(y);
            auto gh = grad(heat);
            for (std::size_t i = 0; i < n; ++i)
                kernels::soft_argmax_sum_backward<T>(grid, h.subspan(i * plane, plane), eps, gy[2 * i], gy[2 * i + 1],
                                                     gh.subspan(i * plane, plane));
        };
        nodes_[y].forward();
        return y;
    }

    /// Sum over channels of the per-channel L2 distance. Subgradient 0 where a channel matches.
    Id kd_loss(Id teacher, Id student) {
        same_shape(teacher, student, "kd_loss");
        const Shape s = nodes_[teacher].shape;
        const std::size_t n = s[0], plane = shape_numel(s) / n;
        const Id y = node({1}, "kd_loss");
        nodes_[y].forward = [=, this] { mut(y)[0] = kernels::heatmap_l2_sum<T>(n, plane, val(teacher), val(student)); };
        nodes_[y].backward = [=, this] {
            auto t = val(teacher), st = val(student);
            const T g = gradv(y)[0];
            auto gt = grad(teacher), gs = grad(student);
            for (std::size_t c = 0; c < n; ++c) {
                T ss = 0;
                for (std::size_t k = 0; k < plane; ++k) {
                    const T d = st[c * plane + k] - t[c * plane + k];
                    ss += d * d;
                }
                if (!(ss > T(0))) continue;
                const T inv = g / std::sqrt(ss);
                for (std::size_t k = 0; k < plane; ++k) {
                    const T d = st[c * plane + k] - t[c * plane + k];
                    gs[c * plane + k] += inv * d;
                    gt[c * plane + k] -= inv * d;
                }
            }
        };
        nodes_[y].forward();
        return y;
    }

    /// Mean over points of squared distance between [N,2] coordinate sets.
    Id l2_loss(Id pred, Id target) {
        same_shape(pred, target, "l2_loss");
        const std::size_t n = nodes_[pred].shape[0];
        const Id y = node({1}, "l2_loss");
        nodes_[y].forward = [=, this] {
            auto p = val(pred), t = val(target);
            T acc = 0;
            for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
            mut(y)[0] = acc / static_cast<T>(n);
        };
        nodes_[y].backward = [=, this] {
            auto p = val(pred), t = val(target);
            const T g = gradv(y)[0] * T(2) / static_cast<T>(n);
            auto gp = grad(pred), gt = grad(target);
            for (std::size_t i = 0; i < p.size(); ++i) {
                gp[i] += g * (p[i] - t[i]);
                gt[i] -= g * (p[i] - t[i]);
            }
        };
        nodes_[y].forward();
        return y;
    }

    /// sum_i w_i * x_i over scalar nodes.
    Id weighted_sum(std::vector<std::pair<Id, T>> terms) {
        for (const auto& [id, w] : terms)
            if (nodes_[id].shape != Shape{1}) throw ShapeError("weighted_sum takes scalar nodes");
        const Id y = node({1}, "weighted_sum");
        nodes_[y].forward = [=, this] {
            T acc = 0;
            for (const auto& [id, w] : terms) acc += w * val(id)[0];
            mut(y)[0] = acc;
        };
        nodes_[y].backward = [=, this] {
            const T g = gradv(y)[0];
            for (const auto& [id, w] : terms) grad(id)[0] += w * g;
        };
        nodes_[y].forward();
        return y;
    }

    /// Zeroes all gradients, seeds d(loss)/d(loss) = 1 and runs the backward closures
    /// in reverse creation order.
    void backward(Id loss) {
        if (nodes_[loss].shape != Shape{1}) throw ShapeError("backward needs a scalar loss");
        for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), T(0));
        nodes_[loss].grad[0] = T(1);
        for (Id i = loss + 1; i-- > 0;)
            if (nodes_[i].backward) nodes_[i].backward();
    }

    /// Recomputes every non-leaf value from the current leaf values.
    void replay() {
        for (auto& n : nodes_)
            if (n.forward) n.forward();
    }

    void set_value(Id id, std::vector<T> values) {
        if (values.size() != nodes_[id].value.size()) throw ShapeError("set_value: size mismatch");
        nodes_[id].value = std::move(values);
    }

    const std::vector<T>& value(Id id) const { return nodes_[id].value; }
    const std::vector<T>& gradient(Id id) const { return nodes_[id].grad; }
    const Shape& shape(Id id) const { return nodes_[id].shape; }
    const std::string& op(Id id) const { return nodes_[id].op; }
    std::size_t size() const { return nodes_.size(); }

    Id param(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw MissingTensorError(name);
        return it->second;
    }
    const std::vector<std::string>& parameter_names() const { return param_order_; }

    /// Sign pattern at every kink (relu inputs, soft-argmax clip). Two evaluations with
    /// equal signatures lie in the same differentiable piece.
    std::vector<bool> kink_signature() const {
        std::vector<bool> sig;
        for (const auto& n : nodes_)
            if (n.kink_source)
                for (T v : nodes_[*n.kink_source].value) sig.push_back(v > T(0));
        return sig;
    }

    Tensor to_tensor(Id id) const {
        const auto& v = nodes_[id].value;
        return Tensor(nodes_[id].shape, std::vector<float>(v.begin(), v.end()));
    }

private:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;
        std::string op;
        std::function<void()> forward;
        std::function<void()> backward;
        std::optional<Id> kink_source;
    };

    Id leaf(Shape shape, std::vector<T> values, const char* op) {
        check_shape(shape);
        if (values.size() != shape_numel(shape)) throw ShapeError("leaf value count does not match shape");
        Node n;
        n.grad.assign(values.size(), T(0));
        n.value = std::move(values);
        n.shape = std::move(shape);
        n.op = op;
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    Id node(Shape shape, const char* op) {
        Node n;
        n.value.assign(shape_numel(shape), T(0));
        n.grad.assign(n.value.size(), T(0));
        n.shape = std::move(shape);
        n.op = op;
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    void same_shape(Id a, Id b, const char* op) const {
        if (nodes_[a].shape != nodes_[b].shape)
            throw ShapeError(std::string(op) + ": " + to_string(nodes_[a].shape) + " vs " + to_string(nodes_[b].shape));
    }

    std::span<const T> val(Id id) const { return nodes_[id].value; }
    std::span<T> mut(Id id) { return nodes_[id].value; }
    std::span<const T> gradv(Id id) const { return nodes_[id].grad; }
    std::span<T> grad(Id id) { return nodes_[id].grad; }

    std::vector<Node> nodes_;
    std::map<std::string, Id> params_;
    std::vector<std::string> param_order_;
};

/// Node ids of a recorded generator forward pass.
struct HeadNodes {
    std::size_t point, edge, mask, raw, attended, refined;
};

/// Records the heatmap generator on `tape` with parameters from `weights` (head.* names)
/// applied to a constant feature map [C,H,W]. Mirrors heatmap_generator_forward op for op.
template <class T>
HeadNodes record_head(Tape<T>& tape, const WeightStore& weights, const Tensor& features, const ModelConfig& cfg) {
    auto p = [&](const std::string& name) {
        const Tensor t = weights.get(name).to_f32();
        return tape.parameter(name, t.shape(), std::vector<T>(t.values().begin(), t.values().end()));
    };
    auto conv = [&](std::size_t x, const std::string& layer) {
        const std::size_t w = p(layer + ".weight");
        const std::size_t b = p(layer + ".bias");
        Conv2dOptions opt;
        opt.pad_h = tape.shape(w)[2] / 2;
        opt.pad_w = tape.shape(w)[3] / 2;
        return tape.conv2d(x, w, b, opt);
    };
    const std::size_t feat = tape.constant(features);
    HeadNodes h{};
    h.point = tape.sigmoid(conv(feat, "head.0.point"));
    h.edge = tape.sigmoid(conv(feat, "head.0.edge"));
    h.mask = tape.mul(h.point, tape.e2p(h.edge, cfg.scheme.incidence(), cfg.num_landmarks()));
    const std::size_t heat = conv(feat, "head.0.heatmap");
    const std::size_t gamma = p("head.0.heatmap_norm.weight");
    const std::size_t beta = p("head.0.heatmap_norm.bias");
    h.raw = tape.relu(tape.instance_norm(heat, gamma, beta, static_cast<T>(cfg.norm_eps)));
    h.attended = tape.mul(h.raw, h.mask);
    std::size_t r = h.attended;
    for (int i = 0; i < 3; ++i) r = conv(r, "head.0.refine" + std::to_string(i));
    h.refined = tape.add(h.attended, r);
    return h;
}

/// Head forward plus the training objective kd * KD(teacher, refined) + reg * L2(decode(refined), target).
struct HeadLossNodes {
    HeadNodes head;
    std::size_t coords, kd, reg, total;
};

/// `teacher` is [N,H,W]; `target` holds N landmarks in input-pixel coordinates.
template <class T>
HeadLossNodes record_head_loss(Tape<T>& tape, const WeightStore& weights, const Tensor& features,
                               const Tensor& teacher, const Tensor& target, const ModelConfig& cfg, T kd_weight,
                               T reg_weight, T decode_eps = T(1e-6)) {
    HeadLossNodes n{};
    n.head = record_head(tape, weights, features, cfg);
    if (teacher.shape() != tape.shape(n.head.refined))
        throw ShapeError("teacher heatmaps " + to_string(teacher.shape()) + " vs student " +
                         to_string(tape.shape(n.head.refined)));
    if (target.shape() != Shape{cfg.num_landmarks(), 2}) throw ShapeError("target must be [N,2]");
    n.kd = tape.kd_loss(tape.constant(teacher), n.head.refined);
    n.coords = tape.soft_argmax(n.head.refined, cfg.decode_stride(), decode_eps);
    n.reg = tape.l2_loss(n.coords, tape.constant(target));
    n.total = tape.weighted_sum({{n.kd, kd_weight}, {n.reg, reg_weight}});
    return n;
}

} // namespace lmk
