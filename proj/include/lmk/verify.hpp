#pragma once

// Self-check suites behind `lmk verify`. Each suite runs randomized trials against
// reference implementations and reports pass counts plus the first few failures.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lmk/model.hpp"
#include "lmk/ops.hpp"
#include "lmk/patch_ops.hpp"
#include "lmk/train.hpp"
#include "lmk/weights.hpp"

namespace lmk {

struct SuiteResult {
    std::string name;
    std::size_t passed = 0;
    std::size_t total = 0;
    std::vector<std::string> failures;  // first few, for diagnostics

    bool ok() const { return total > 0 && passed == total; }

    void record(bool success, const std::function<std::string()>& describe) {
        ++total;
        if (success)
            ++passed;
        else if (failures.size() < 5)
            failures.push_back(describe());
    }
};

inline const std::vector<std::string>& verify_suite_names() {
    static const std::vector<std::string> names{"patch-ops", "gradients", "softargmax", "weights-io"};
    return names;
}

namespace detail {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng) {
    std::normal_distribution<float> normal(0.0f, 1.0f);
    Tensor t(shape);
    for (auto& x : t.mutable_values()) x = normal(rng);
    return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Direct rank-6 permute by index arithmetic (does not go through ops::permute).
inline Tensor permute6_direct(const Tensor& x, const std::vector<std::size_t>& order) {
    const Shape& in = x.shape();
    Shape out_shape(6);
    for (std::size_t i = 0; i < 6; ++i) out_shape[i] = in[order[i]];
    Tensor out(out_shape);
    const auto in_strides = row_major_strides(in);
    auto src = x.values();
    auto dst = out.mutable_values();
    std::size_t idx[6] = {};
    for (std::size_t flat = 0; flat < dst.size(); ++flat) {
        std::size_t rem = flat, off = 0;
        for (int a = 5; a >= 0; --a) {
            idx[a] = rem % out_shape[a];
            rem /= out_shape[a];
        }
        for (std::size_t a = 0; a < 6; ++a) off += idx[a] * in_strides[order[a]];
        dst[flat] = src[off];
    }
    return out;
}

} // namespace detail

/// Fold-free unfold/fold and permute6_via_5d against reference loops, bit-exact,
/// plus a trace check that no rank-6 permute is issued.
inline SuiteResult verify_patch_ops(std::size_t trials, std::uint64_t seed) {
    SuiteResult r{"patch-ops", 0, 0, {}};
    std::mt19937_64 rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        PatchSpec spec{detail::pick(rng, 1, 3), detail::pick(rng, 1, 3)};
        const std::size_t b = detail::pick(rng, 1, 2), c = detail::pick(rng, 1, 4);
        const std::size_t h = spec.patch_h * detail::pick(rng, 1, 5), w = spec.patch_w * detail::pick(rng, 1, 5);
        const Tensor x = detail::random_tensor({b, c, h, w}, rng);
        const std::string where = to_string(x.shape()) + " patch " + std::to_string(spec.patch_h) + "x" +
                                  std::to_string(spec.patch_w);

        TraceScope trace;
        const Tensor u = unfold_foldfree(x, spec);
        const Tensor f = fold_foldfree(u, spec, h, w);
        bool no_rank6 = true;
        for (const auto& e : trace.entries()) no_rank6 = no_rank6 && !(e.op == "permute" && e.rank >= 6);
        r.record(bit_equal(u, unfold_naive(x, spec)), [&] { return "unfold mismatch " + where; });
        r.record(bit_equal(f, fold_naive(u, spec, h, w)), [&] { return "fold mismatch " + where; });
        r.record(bit_equal(f, x), [&] { return "fold(unfold(x)) != x " + where; });
        r.record(no_rank6, [&] { return "rank-6 permute issued " + where; });

        std::vector<std::size_t> order{0, 1, 2, 3, 4, 5};
        std::shuffle(order.begin(), order.end(), rng);
        Shape s6(6);
        for (auto& d : s6) d = detail::pick(rng, 1, 3);
        const Tensor y = detail::random_tensor(s6, rng);
        const std::size_t axis = detail::pick(rng, 0, 5);
        r.record(bit_equal(permute6_via_5d(y, order, axis), detail::permute6_direct(y, order)),
                 [&] { return "permute6_via_5d mismatch " + to_string(s6) + " split " + std::to_string(axis); });
    }
    return r;
}

/// Analytic head gradients against central differences, one random problem per trial.
inline SuiteResult verify_gradients(std::size_t trials, std::uint64_t seed, double tol_f64 = 1e-4,
                                    double tol_f32 = 1e-2) {
    SuiteResult r{"gradients", 0, 0, {}};
    for (std::size_t t = 0; t < trials; ++t) {
        const GradCheckProblem p = make_gradcheck_problem(seed + t);
        const GradCheckReport g64 = gradient_check<double>(p);
        const GradCheckReport g32 = gradient_check<float>(p);
        r.record(g64.passed(tol_f64), [&] {
            return "f64 rel error " + std::to_string(g64.max_rel_error) + " at " + g64.worst_parameter;
        });
        r.record(g32.passed(tol_f32), [&] {
            return "f32 rel error " + std::to_string(g32.max_rel_error) + " at " + g32.worst_parameter;
        });
    }
    return r;
}

/// Sum-mode decode on a 64x64 grid with stride 4 against flat loops.
inline SuiteResult verify_softargmax(std::size_t trials, std::uint64_t seed) {
    SuiteResult r{"softargmax", 0, 0, {}};
    std::mt19937_64 rng(seed);
    const std::size_t n = 64;
    DecodeOptions opt;
    opt.stride = 4.0;
    for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t row = detail::pick(rng, 0, n - 1), col = detail::pick(rng, 0, n - 1);
        Tensor one_hot({1, n, n}, 0.0f);
        one_hot.mutable_values()[one_hot.offset({0, row, col})] = 1.0f;
        const Point p = soft_argmax(one_hot, opt).landmarks.points[0];
        const double ex = (static_cast<double>(col) + 0.5) * 4.0;
        const double ey = (static_cast<double>(row) + 0.5) * 4.0;
        r.record(p.x == ex && p.y == ey, [&] { return "one-hot at " + std::to_string(row) + "," + std::to_string(col); });

        Tensor heat({1, n, n});
        std::uniform_real_distribution<float> unit(0.0f, 1.0f);
        for (auto& v : heat.mutable_values()) v = unit(rng);
        double total = 0, sx = 0, sy = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double v = heat.at({0, i, j});
                total += v;
                sx += v * (static_cast<double>(j) + 0.5) * 4.0;
                sy += v * (static_cast<double>(i) + 0.5) * 4.0;
            }
        const Point q = soft_argmax(heat, opt).landmarks.points[0];
        r.record(std::abs(q.x - sx / total) <= 1e-5 && std::abs(q.y - sy / total) <= 1e-5,
                 [&] { return "random heatmap trial " + std::to_string(t); });

        Tensor scaled = heat;
        const float k = std::uniform_real_distribution<float>(0.01f, 100.0f)(rng);
        for (auto& v : scaled.mutable_values()) v *= k;
        const Point s = soft_argmax(scaled, opt).landmarks.points[0];
        r.record(std::abs(s.x - q.x) <= 1e-5 && std::abs(s.y - q.y) <= 1e-5,
                 [&] { return "rescale by " + std::to_string(k) + " in trial " + std::to_string(t); });
    }
    const Tensor uniform({1, n, n}, 1.0f);
    const Point c = soft_argmax(uniform, opt).landmarks.points[0];
    r.record(std::abs(c.x - 128.0) <= 1e-4 && std::abs(c.y - 128.0) <= 1e-4, [] { return "uniform centroid"; });
    return r;
}

/// Randomized container round trips and single-bit corruption detection.
inline SuiteResult verify_weights_io(std::size_t trials, std::uint64_t seed) {
    SuiteResult r{"weights-io", 0, 0, {}};
    std::mt19937_64 rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        WeightStore store;
        const std::size_t count = detail::pick(rng, 0, 12);
        for (std::size_t i = 0; i < count; ++i) {
            Shape s(detail::pick(rng, 1, 4));
            for (auto& d : s) d = detail::pick(rng, 1, 5);
            Tensor x = detail::random_tensor(s, rng);
            store.add("t" + std::to_string(i), detail::pick(rng, 0, 1) ? x.to_f16() : x);
        }
        const auto bytes = serialize(store);
        bool round_trip = false;
        try {
            round_trip = bit_equal(deserialize(bytes), store) && serialize(deserialize(bytes)) == bytes;
        } catch (const Error&) {
        }
        r.record(round_trip, [&] { return "round trip failed, trial " + std::to_string(t); });

        auto corrupt = bytes;
        const std::size_t bit = detail::pick(rng, 0, corrupt.size() * 8 - 1);
        corrupt[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
        bool detected = false;
        try {
            deserialize(corrupt);
        } catch (const FormatError&) {
            detected = true;
        }
        r.record(detected, [&] { return "undetected flip of bit " + std::to_string(bit); });
    }
    return r;
}

inline SuiteResult run_suite(const std::string& name, std::size_t trials, std::uint64_t seed) {
    if (name == "patch-ops") return verify_patch_ops(trials, seed);
    if (name == "gradients") return verify_gradients(trials, seed);
    if (name == "softargmax") return verify_softargmax(trials, seed);
    if (name == "weights-io") return verify_weights_io(trials, seed);
    throw ArgumentError("unknown verify suite '" + name + "'");
}

} // namespace lmk
