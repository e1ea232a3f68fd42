// Acceptance run: one PASS/FAIL line per primary criterion. Tolerances and trial counts
// are fixed here; the process exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lmk/data.hpp"
#include "lmk/losses.hpp"
#include "lmk/model.hpp"
#include "lmk/patch_ops.hpp"
#include "lmk/profiler.hpp"
#include "lmk/train.hpp"
#include "lmk/weights.hpp"
#include "oracles.hpp"

using namespace lmk;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok && pass) detail = what;  // keep the first failure
        pass = pass && ok;
    }
};

std::size_t draw(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// ---------------------------------------------------------------------------

Outcome rewrite_equivalence() {
    Outcome o;
    std::mt19937_64 rng(2024);
    std::size_t unfold_cases = 0, permute_cases = 0;
    for (int t = 0; t < 1000; ++t) {
        // Patch ops on a random [B,C,H,W] with a random (possibly rectangular) patch.
        const std::size_t ph = draw(rng, 1, 4), pw = draw(rng, 1, 4);
        const std::size_t b = draw(rng, 1, 2), c = draw(rng, 1, 6);
        const std::size_t h = ph * draw(rng, 1, 8), w = pw * draw(rng, 1, 8);
        const Tensor x = oracle::random_tensor({b, c, h, w}, rng);
        const PatchSpec spec{ph, pw};
        TraceScope trace;
        const Tensor u = unfold_foldfree(x, spec);
        const Tensor f = fold_foldfree(u, spec, h, w);
        for (const auto& e : trace.entries())
            o.require(!(e.op == "permute" && e.rank > 5), "fold-free path issued a rank-6 permute");
        const std::string where = " case " + std::to_string(t) + " " + to_string(x.shape()) + " patch " +
                                  std::to_string(ph) + "x" + std::to_string(pw);
        o.require(bit_equal(u, oracle::unfold(x, ph, pw)), "unfold differs from oracle" + where);
        o.require(bit_equal(u, unfold_naive(x, spec)), "unfold differs from naive" + where);
        o.require(bit_equal(f, oracle::fold(u, ph, pw, h, w)), "fold differs from oracle" + where);
        o.require(bit_equal(f, fold_naive(u, spec, h, w)), "fold differs from naive" + where);
        o.require(bit_equal(f, x), "fold(unfold(x)) != x" + where);
        ++unfold_cases;

        // Rank-6 permutation through rank-5 pieces against a direct gather.
        Shape s6(6);
        for (auto& d : s6) d = draw(rng, 1, 4);
        const Tensor y = oracle::random_tensor(s6, rng);
        std::vector<std::size_t> order(6);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t axis = draw(rng, 0, 5);
        TraceScope trace6;
        const Tensor p = permute6_via_5d(y, order, axis);
        for (const auto& e : trace6.entries())
            o.require(!(e.op == "permute" && e.rank > 5), "permute6_via_5d issued a rank-6 permute");
        o.require(bit_equal(p, oracle::permute(y, order)), "permute6 differs from direct permutation, case " +
                                                               std::to_string(t));
        ++permute_cases;
    }
    o.detail = o.pass ? std::to_string(unfold_cases) + " patch cases and " + std::to_string(permute_cases) +
                            " rank-6 permutations bit-identical"
                      : o.detail;
    return o;
}

Outcome soft_argmax_contract() {
    Outcome o;
    const std::size_t n = 64;
    DecodeOptions opt;
    opt.stride = 4.0;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            Tensor h({1, n, n});
            h.mutable_values()[r * n + c] = 1.0f;
            const Point p = soft_argmax(h, opt).landmarks.points[0];
            o.require(p.x == (c + 0.5) * 4.0 && p.y == (r + 0.5) * 4.0,
                      "one-hot at " + std::to_string(r) + "," + std::to_string(c) + " not exact");
        }
    const Point u = soft_argmax(Tensor({1, n, n}, 0.7f), opt).landmarks.points[0];
    o.require(std::abs(u.x - 128.0) <= 1e-4 && std::abs(u.y - 128.0) <= 1e-4, "uniform heatmap not at (128,128)");

    std::mt19937_64 rng(7);
    double worst = 0, worst_rescale = 0;
    for (int t = 0; t < 100; ++t) {
        const Tensor h = oracle::random_tensor({1, n, n}, rng, 0.0f, 1.0f);
        double ex = 0, ey = 0;
        oracle::soft_argmax(h.values().data(), n, n, 4.0, ex, ey);
        const Point p = soft_argmax(h, opt).landmarks.points[0];
        worst = std::max({worst, std::abs(p.x - ex), std::abs(p.y - ey)});
        Tensor scaled = h;
        const float k = std::uniform_real_distribution<float>(1e-3f, 1e3f)(rng);
        for (auto& v : scaled.mutable_values()) v *= k;
        const Point q = soft_argmax(scaled, opt).landmarks.points[0];
        worst_rescale = std::max({worst_rescale, std::abs(q.x - p.x), std::abs(q.y - p.y)});
    }
    o.require(worst <= 1e-5, "flat-loop disagreement " + std::to_string(worst) + " px");
    o.require(worst_rescale <= 1e-5, "rescale drift " + std::to_string(worst_rescale) + " px");
    if (o.pass) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "4096 one-hot exact; 100 random max err %.2e px; rescale drift %.2e px", worst,
                      worst_rescale);
        o.detail = buf;
    }
    return o;
}

Outcome shape_ladder() {
    Outcome o;
    const ModelConfig cfg = ModelConfig::student();
    std::mt19937_64 rng(3);
    const BackboneOutput out =
        backbone_forward(oracle::random_tensor({3, 256, 256}, rng, 0, 1), random_weights(cfg, 3), cfg);
    const std::vector<Shape> expected{{16, 128, 128}, {32, 128, 128}, {64, 64, 64},
                                      {128, 32, 32},  {192, 16, 16},  {256, 8, 8}};
    o.require(out.stages.size() == expected.size(), "wrong number of stages");
    std::string ladder;
    for (std::size_t s = 0; s < std::min(expected.size(), out.stages.size()); ++s) {
        o.require(out.stages[s].shape() == expected[s], "stage " + std::to_string(s) + " is " +
                                                            to_string(out.stages[s].shape()));
        ladder += (s ? " " : "") + to_string(out.stages[s].shape());
    }
    if (o.pass) o.detail = ladder;
    return o;
}

Outcome profiler_vs_published() {
    Outcome o;
    const CostReport r = profile(ModelConfig::student());
    const double params = static_cast<double>(r.total_params()), macs = static_cast<double>(r.total_macs());
    const double dp = params / 1.1419e6 - 1.0, dm = macs / 581.354e6 - 1.0;
    o.require(std::abs(dp) < 0.10, "params off by " + std::to_string(100 * dp) + "%");
    o.require(std::abs(dm) < 0.10, "MACs off by " + std::to_string(100 * dm) + "%");
    const auto doc = std::filesystem::path(LMK_SOURCE_DIR) / "docs" / "profile_reconciliation.md";
    o.require(std::filesystem::exists(doc), "reconciliation document missing: " + doc.string());
    if (o.pass) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "params %.0f (%+.2f%%), MACs %.0f (%+.2f%%)", params, 100 * dp, macs, 100 * dm);
        o.detail = buf;
    }
    return o;
}

Outcome kd_loss_contract() {
    Outcome o;
    std::mt19937_64 rng(5);
    const Tensor a = oracle::random_tensor({51, 64, 64}, rng, 0, 1);
    o.require(kd_loss(a, a) == 0.0f, "identical stacks give non-zero loss");
    for (float c : {0.25f, -1.0f, 2.5f}) {
        const float l = kd_loss(Tensor({1, 64, 64}, 0.0f), Tensor({1, 64, 64}, c));
        o.require(std::abs(l - 64.0f * std::abs(c)) <= 1e-5f * 64.0f * std::abs(c),
                  "constant offset " + std::to_string(c) + " gives " + std::to_string(l));
    }
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        const Tensor t1 = oracle::random_tensor({51, 64, 64}, rng, 0, 1), t2 = oracle::random_tensor({51, 64, 64}, rng, 0, 1);
        double expected = 0;
        for (std::size_t i = 0; i < 51; ++i) {
            double sq = 0;
            for (std::size_t k = 0; k < 4096; ++k) {
                const double d = static_cast<double>(t1[i * 4096 + k]) - t2[i * 4096 + k];
                sq += d * d;
            }
            expected += std::sqrt(sq);
        }
        worst = std::max(worst, std::abs(kd_loss(t1, t2) - expected) / expected);
    }
    o.require(worst <= 1e-5, "random pair relative error " + std::to_string(worst));
    if (o.pass) {
        char buf[120];
        std::snprintf(buf, sizeof buf, "zero/closed form exact; 100 random pairs max rel err %.2e", worst);
        o.detail = buf;
    }
    return o;
}

Outcome gradient_verification() {
    Outcome o;
    double worst = 0;
    std::string where;
    std::size_t checked = 0, skipped = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const GradCheckReport r = gradient_check<double>(make_gradcheck_problem(seed));
        checked += r.checked;
        skipped += r.skipped;
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            where = r.worst_parameter + " (seed " + std::to_string(seed) + ")";
        }
        o.require(r.passed(1e-4), "seed " + std::to_string(seed) + ": " + std::to_string(r.max_rel_error) + " at " +
                                      r.worst_parameter);
    }
    if (o.pass) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "10 problems, %zu elements (%zu skipped at kinks), max rel err %.2e at %s",
                      checked, skipped, worst, where.c_str());
        o.detail = buf;
    }
    return o;
}

Outcome toy_distillation() {
    Outcome o;
    const ToyDistillConfig c;  // batch 16
    const auto a = toy_distill_run(c, 200, 42);
    const auto b = toy_distill_run(c, 200, 42);
    o.require(a.size() == 200, "trajectory has " + std::to_string(a.size()) + " steps");
    const double ratio = a.empty() ? 1.0 : a.back().total / a.front().total;
    o.require(ratio < 0.5, "final/initial = " + std::to_string(ratio));
    bool same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i)
        same = a[i].total == b[i].total && a[i].kd == b[i].kd && a[i].reg == b[i].reg;
    o.require(same, "trajectory not bit-reproducible");
    if (o.pass) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "loss %.4f -> %.4f (ratio %.3f < 0.5), reproducible", a.front().total,
                      a.back().total, ratio);
        o.detail = buf;
    }
    return o;
}

WeightStore random_store(std::mt19937_64& rng) {
    WeightStore w;
    const std::size_t n = draw(rng, 0, 100);
    for (std::size_t i = 0; i < n; ++i) {
        Shape s(draw(rng, 1, 4));
        for (auto& d : s) d = draw(rng, 1, 6);
        Tensor t = oracle::random_tensor(s, rng, -1e4f, 1e4f);
        w.add("t" + std::to_string(i) + "." + std::string(draw(rng, 0, 20), 'x'), draw(rng, 0, 1) ? t.to_f16() : t);
    }
    return w;
}

/// [begin, end) byte ranges of tensor payloads, computed from the documented layout.
std::vector<std::pair<std::size_t, std::size_t>> payload_ranges(const WeightStore& w) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t pos = 16;
    for (const auto& e : w.entries()) {
        pos += 4 + e.name.size() + 2 + 8 * e.tensor.rank();
        const std::size_t bytes = e.tensor.numel() * (e.tensor.dtype() == DType::f32 ? 4 : 2);
        out.emplace_back(pos, pos + bytes);
        pos = (pos + bytes + 7) / 8 * 8;
    }
    return out;
}

Outcome weight_container() {
    Outcome o;
    std::mt19937_64 rng(11);
    std::size_t flips = 0;
    for (int t = 0; t < 1000; ++t) {
        const WeightStore w = random_store(rng);
        const auto bytes = serialize(w);
        o.require(bit_equal(deserialize(bytes), w), "round trip " + std::to_string(t) + " not bit-exact");
        o.require(oracle::crc32({bytes.begin(), bytes.end() - 4}) ==
                      (bytes[bytes.size() - 4] | bytes[bytes.size() - 3] << 8 | bytes[bytes.size() - 2] << 16 |
                       static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24),
                  "trailer is not the CRC-32 of the preceding bytes");
        const auto ranges = payload_ranges(w);
        if (ranges.empty()) continue;
        // One random payload bit flip per store.
        const auto& [lo, hi] = ranges[draw(rng, 0, ranges.size() - 1)];
        auto bad = bytes;
        bad[draw(rng, lo, hi - 1)] ^= static_cast<std::uint8_t>(1u << draw(rng, 0, 7));
        bool detected = false;
        try {
            deserialize(bad);
        } catch (const ChecksumError&) {
            detected = true;
        } catch (const Error&) {
        }
        o.require(detected, "payload bit flip in store " + std::to_string(t) + " not reported as a CRC failure");
        ++flips;
    }
    if (o.pass) o.detail = "1000 round trips bit-exact; " + std::to_string(flips) + "/" + std::to_string(flips) +
                           " payload bit flips caught by CRC";
    return o;
}

Outcome augmentation() {
    Outcome o;
    const std::size_t size = 256;
    Tensor coords(Shape{3, size, size});
    {
        auto v = coords.mutable_values();
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                v[y * size + x] = static_cast<float>(x) + 0.5f;
                v[(size + y) * size + x] = static_cast<float>(y) + 0.5f;
                v[(2 * size + y) * size + x] = 0.5f;
            }
    }
    const auto flip = LandmarkScheme::face51().flip_permutation;
    std::mt19937_64 data(13);
    std::uniform_real_distribution<float> central(96.0f, 160.0f);
    auto landmarks = [&] {
        LandmarkSet s;
        for (int i = 0; i < 51; ++i) s.points.push_back({central(data), central(data)});
        return s;
    };

    // Determinism under the full policy (geometric and photometric).
    AugmentPolicy full;
    full.flip_permutation = flip;
    std::mt19937_64 pix(17);
    const Tensor photo = oracle::random_tensor({3, size, size}, pix, 0, 1);
    for (std::uint64_t idx = 0; idx < 20; ++idx) {
        const LandmarkSet lms = landmarks();
        auto r1 = sample_rng(99, idx), r2 = sample_rng(99, idx);
        const AugmentedSample a = augment(photo, lms, full, r1), b = augment(photo, lms, full, r2);
        bool same = bit_equal(a.image, b.image);
        for (std::size_t i = 0; i < lms.size(); ++i)
            same = same && a.landmarks.points[i].x == b.landmarks.points[i].x &&
                   a.landmarks.points[i].y == b.landmarks.points[i].y;
        o.require(same, "sample " + std::to_string(idx) + " not byte-identical under the same seed");
    }

    // Geometric consistency: the augmented coordinate image, read at each moved landmark,
    // must return that landmark's source position.
    AugmentPolicy geo = full;
    geo.blur_prob = geo.gray_prob = geo.occlusion_prob = 0;
    double worst = 0;
    for (std::uint64_t idx = 0; idx < 100; ++idx) {
        const LandmarkSet lms = landmarks();
        auto rng = sample_rng(5, idx);
        const AugmentedSample a = augment(coords, lms, geo, rng);
        for (std::size_t j = 0; j < lms.size(); ++j) {
            const Point q = a.landmarks.points[j];
            const Point src = lms.points[a.record.flipped ? flip[j] : j];
            const double u = q.x - 0.5, v = q.y - 0.5;
            const auto x0 = static_cast<std::size_t>(std::floor(u)), y0 = static_cast<std::size_t>(std::floor(v));
            const double ax = u - std::floor(u), ay = v - std::floor(v);
            for (std::size_t ch = 0; ch < 2; ++ch) {
                auto at = [&](std::size_t yy, std::size_t xx) {
                    return static_cast<double>(a.image[(ch * size + yy) * size + xx]);
                };
                const double read = (at(y0, x0) * (1 - ax) + at(y0, x0 + 1) * ax) * (1 - ay) +
                                    (at(y0 + 1, x0) * (1 - ax) + at(y0 + 1, x0 + 1) * ax) * ay;
                worst = std::max(worst, std::abs(read - (ch == 0 ? src.x : src.y)));
            }
        }
    }
    o.require(worst <= 1e-3, "landmark/image inconsistency " + std::to_string(worst) + " px");
    if (o.pass) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "20 seeded samples byte-identical; 100 samples max inconsistency %.2e px", worst);
        o.detail = buf;
    }
    return o;
}

} // namespace

int main() {
    struct Criterion {
        const char* name;
        double budget_s;  // wall-clock limit, 0 = none
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {"operator-rewrite-equivalence", 60, rewrite_equivalence},
        {"soft-argmax-contract", 0, soft_argmax_contract},
        {"backbone-shape-ladder", 0, shape_ladder},
        {"profiler-vs-published-totals", 5, profiler_vs_published},
        {"kd-loss", 0, kd_loss_contract},
        {"gradient-verification", 300, gradient_verification},
        {"toy-distillation", 600, toy_distillation},
        {"weight-container", 0, weight_container},
        {"augmentation-determinism-and-geometry", 0, augmentation},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget_s > 0 && secs > c.budget_s) {
            o.pass = false;
            o.detail += " (over the " + std::to_string(static_cast<int>(c.budget_s)) + " s budget)";
        }
        std::printf("%s %s: %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
        failures += !o.pass;
    }
    return failures == 0 ? 0 : 1;
}
