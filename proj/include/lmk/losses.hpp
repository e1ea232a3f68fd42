#pragma once

#include <cmath>
#include <string>

#include "lmk/kernels.hpp"
#include "lmk/model.hpp"
#include "lmk/tensor.hpp"

namespace lmk {

enum class KdMode {
    per_landmark_l2,  // sum over landmarks of the L2 norm over all cells
    per_cell_abs,     // sum over landmarks and cells of |T - S|
};

/// Heatmap distillation loss between teacher and student [N,H,W] stacks.
inline float kd_loss(const Tensor& teacher, const Tensor& student, KdMode mode = KdMode::per_landmark_l2) {
    const detail::F32 t(teacher), s(student);
    if (t->shape() != s->shape())
        throw ShapeError("kd_loss: teacher " + to_string(t->shape()) + " vs student " + to_string(s->shape()));
    if (t->rank() < 2) throw ShapeError("kd_loss expects [N, ...] heatmaps");
    const std::size_t n = t->dim(0), plane = t->numel() / n;
    if (mode == KdMode::per_landmark_l2) return kernels::heatmap_l2_sum<float>(n, plane, t->values(), s->values());
    float acc = 0;
    for (std::size_t k = 0; k < t->numel(); ++k) acc += std::abs((*t)[k] - (*s)[k]);
    return acc;
}

/// Mean over landmarks of the squared Euclidean distance.
inline float l2_regression_loss(const LandmarkSet& pred, const LandmarkSet& gt) {
    if (pred.size() != gt.size() || pred.size() == 0)
        throw ShapeError("l2_regression_loss: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) +
                         " landmarks");
    double acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double dx = pred.points[i].x - gt.points[i].x, dy = pred.points[i].y - gt.points[i].y;
        acc += dx * dx + dy * dy;
    }
    return static_cast<float>(acc / static_cast<double>(pred.size()));
}

struct NmeNorm {
    enum class Kind { bbox_diag, interocular, constant };
    Kind kind = Kind::bbox_diag;
    std::size_t left = 0, right = 0;  // interocular landmark indices
    float value = 1.0f;               // constant normalizer

    static NmeNorm bbox_diag() { return {}; }
    static NmeNorm interocular(std::size_t i, std::size_t j) { return {Kind::interocular, i, j, 1.0f}; }
    static NmeNorm constant(float c) { return {Kind::constant, 0, 0, c}; }
};

/// Diagonal of the axis-aligned box around the points.
inline float bbox_diagonal(const LandmarkSet& s) {
    double x0 = s.points.at(0).x, x1 = x0, y0 = s.points[0].y, y1 = y0;
    for (const auto& p : s.points) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    return static_cast<float>(std::hypot(x1 - x0, y1 - y0));
}

inline float nme_normalizer(const LandmarkSet& gt, const NmeNorm& norm) {
    switch (norm.kind) {
    case NmeNorm::Kind::bbox_diag: return bbox_diagonal(gt);
    case NmeNorm::Kind::interocular: {
        if (norm.left >= gt.size() || norm.right >= gt.size()) throw ArgumentError("interocular index out of range");
        const auto& a = gt.points[norm.left];
        const auto& b = gt.points[norm.right];
        return static_cast<float>(std::hypot(a.x - b.x, a.y - b.y));
    }
    case NmeNorm::Kind::constant: return norm.value;
    }
    return 0;
}

/// Normalized mean error in percent: 100 * mean_i ||pred_i - gt_i|| / D.
inline float nme(const LandmarkSet& pred, const LandmarkSet& gt, const NmeNorm& norm = NmeNorm::bbox_diag()) {
    if (pred.size() != gt.size() || pred.size() == 0) throw ShapeError("nme: landmark count mismatch");
    const float d = nme_normalizer(gt, norm);
    if (!(d > 0)) throw ArgumentError("nme: normalizer must be positive, got " + std::to_string(d));
    double acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        acc += std::hypot(pred.points[i].x - gt.points[i].x, pred.points[i].y - gt.points[i].y);
    return static_cast<float>(100.0 * acc / static_cast<double>(pred.size()) / d);
}

struct LossWeights {
    float kd = 1.0f;
    float reg = 1.0f;
};

struct LossReport {
    float kd = 0;
    float reg = 0;
    float total = 0;
};

inline LossReport combine(float kd, float reg, const LossWeights& w = {}) { return {kd, reg, w.kd * kd + w.reg * reg}; }

} // namespace lmk
