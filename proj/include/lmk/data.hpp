#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lmk/error.hpp"
#include "lmk/model.hpp"
#include "lmk/weights.hpp"

namespace lmk {

// ---------------------------------------------------------------------------
// Annotations: one JSON object per line,
//   {"image": "a.ppm", "bbox": [x, y, w, h], "landmarks": [[x, y], ...], "teacher": "a.lmkw"}
// "teacher" is optional. Relative paths resolve against the annotation file's directory.
// ---------------------------------------------------------------------------

struct BBox {
    float x = 0, y = 0, w = 0, h = 0;
};

struct AnnotatedSample {
    std::string image;
    BBox bbox;
    LandmarkSet landmarks;
    std::optional<std::string> teacher;
};

inline AnnotatedSample parse_annotation(const nlohmann::json& j, const std::filesystem::path& base) {
    AnnotatedSample s;
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path path(p);
        return (path.is_absolute() ? path : base / path).lexically_normal().string();
    };
    s.image = resolve(j.at("image").get<std::string>());
    const auto box = j.at("bbox").get<std::vector<float>>();
    if (box.size() != 4) throw FormatError("bbox must have 4 numbers");
    s.bbox = {box[0], box[1], box[2], box[3]};
    if (!(s.bbox.w > 0 && s.bbox.h > 0)) throw FormatError("bbox width and height must be positive");
    for (const auto& p : j.at("landmarks")) {
        const auto xy = p.get<std::vector<float>>();
        if (xy.size() != 2) throw FormatError("landmark must be [x, y]");
        s.landmarks.points.push_back({xy[0], xy[1]});
    }
    if (j.contains("teacher") && !j.at("teacher").is_null()) s.teacher = resolve(j.at("teacher").get<std::string>());
    return s;
}

/// Reads an annotation file; every record must carry `num_landmarks` points (0 = any).
inline std::vector<AnnotatedSample> load_annotations(const std::filesystem::path& path, std::size_t num_landmarks = 0) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open annotations " + path.string());
    std::vector<AnnotatedSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(parse_annotation(nlohmann::json::parse(line), path.parent_path()));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (num_landmarks && out.back().landmarks.size() != num_landmarks)
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(num_landmarks) + " landmarks, got " +
                              std::to_string(out.back().landmarks.size()));
    }
    return out;
}

inline std::string annotation_line(const AnnotatedSample& s) {
    nlohmann::json j;
    j["image"] = s.image;
    j["bbox"] = {s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h};
    j["landmarks"] = nlohmann::json::array();
    for (const auto& p : s.landmarks.points) j["landmarks"].push_back({p.x, p.y});
    if (s.teacher) j["teacher"] = *s.teacher;
    return j.dump();
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// x' = a x + b y + tx, y' = c x + d y + ty, in continuous pixel coordinates.
struct Affine {
    double a = 1, b = 0, c = 0, d = 1, tx = 0, ty = 0;

    Point apply(Point p) const {
        return {a * p.x + b * p.y + tx, c * p.x + d * p.y + ty};
    }
    void apply(double x, double y, double& ox, double& oy) const {
        ox = a * x + b * y + tx;
        oy = c * x + d * y + ty;
    }

    Affine inverse() const {
        const double det = a * d - b * c;
        if (std::abs(det) < 1e-12) throw ArgumentError("singular affine transform");
        Affine r{d / det, -b / det, -c / det, a / det, 0, 0};
        r.tx = -(r.a * tx + r.b * ty);
        r.ty = -(r.c * tx + r.d * ty);
        return r;
    }

    /// This transform followed by `next`.
    Affine then(const Affine& next) const {
        return {next.a * a + next.b * c, next.a * b + next.b * d, next.c * a + next.d * c,
                next.c * b + next.d * d, next.a * tx + next.b * ty + next.tx, next.c * tx + next.d * ty + next.ty};
    }

    static Affine translation(double x, double y) { return {1, 0, 0, 1, x, y}; }
    static Affine scaling(double sx, double sy) { return {sx, 0, 0, sy, 0, 0}; }
    static Affine rotation(double radians) {
        const double cs = std::cos(radians), sn = std::sin(radians);
        return {cs, -sn, sn, cs, 0, 0};
    }
};

inline LandmarkSet transform(const LandmarkSet& s, const Affine& t) {
    LandmarkSet out;
    out.points.reserve(s.size());
    for (const auto& p : s.points) out.points.push_back(t.apply(p));
    return out;
}

/// Bilinear sample of [C,H,W] at continuous position (x, y); pixels outside read as 0.
inline void sample_bilinear(const Tensor& img, double x, double y, float* out) {
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const double u = x - 0.5, v = y - 0.5;
    const double fu = std::floor(u), fv = std::floor(v);
    const long x0 = static_cast<long>(fu), y0 = static_cast<long>(fv);
    const double ax = u - fu, ay = v - fv;
    const auto vals = img.values();
    for (std::size_t ch = 0; ch < c; ++ch) {
        auto px = [&](long yy, long xx) -> double {
            if (xx < 0 || yy < 0 || xx >= static_cast<long>(w) || yy >= static_cast<long>(h)) return 0.0;
            return vals[(ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
        };
        const double top = px(y0, x0) * (1 - ax) + px(y0, x0 + 1) * ax;
        const double bot = px(y0 + 1, x0) * (1 - ax) + px(y0 + 1, x0 + 1) * ax;
        out[ch] = static_cast<float>(top * (1 - ay) + bot * ay);
    }
}

/// Resamples `src` so that source point p lands at forward(p) in an out_h x out_w image.
inline Tensor warp_affine(const Tensor& src, const Affine& forward, std::size_t out_h, std::size_t out_w) {
    const detail::F32 s(src);
    const Affine inv = forward.inverse();
    const std::size_t c = s->dim(0);
    Tensor out(Shape{c, out_h, out_w});
    auto dst = out.mutable_values();
    std::vector<float> px(c);
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
            double sx, sy;
            inv.apply(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, sx, sy);
            sample_bilinear(*s, sx, sy, px.data());
            for (std::size_t ch = 0; ch < c; ++ch) dst[(ch * out_h + y) * out_w + x] = px[ch];
        }
    return out;
}

struct CropResult {
    Tensor image;
    LandmarkSet landmarks;
    Affine forward;  // source -> crop coordinates
    Affine inverse;  // crop -> source coordinates
};

/// Crops `bbox` (zero-padded outside the image) and resizes it to size x size.
inline CropResult crop_resize(const Tensor& image, const BBox& bbox, const LandmarkSet& landmarks,
                              std::size_t size = 256) {
    if (image.rank() != 3) throw ShapeError("crop_resize expects [C,H,W]");
    if (!(bbox.w > 0 && bbox.h > 0)) throw ArgumentError("degenerate bounding box");
    const float ih = static_cast<float>(image.dim(1)), iw = static_cast<float>(image.dim(2));
    if (bbox.x >= iw || bbox.y >= ih || bbox.x + bbox.w <= 0 || bbox.y + bbox.h <= 0)
        throw ArgumentError("bounding box does not intersect the image");
    CropResult r;
    const double s = static_cast<double>(size);
    r.forward = Affine::translation(-bbox.x, -bbox.y).then(Affine::scaling(s / bbox.w, s / bbox.h));
    r.inverse = r.forward.inverse();
    r.image = warp_affine(image, r.forward, size, size);
    r.landmarks = transform(landmarks, r.forward);
    return r;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentPolicy {
    double rotation_deg = 45.0;    // angle ~ U(-r, r)
    double scale_jitter = 0.10;    // scale ~ U(1 - s, 1 + s)
    double translate_frac = 0.18;  // shift ~ U(-t, t) * size, per axis
    double blur_prob = 0.40;
    double gray_prob = 0.20;
    double occlusion_prob = 0.40;
    double hflip_prob = 0.50;
    double blur_sigma_min = 0.1, blur_sigma_max = 2.0;
    double occlusion_min = 0.10, occlusion_max = 0.30;  // rectangle side as a fraction of the crop
    std::vector<std::size_t> flip_permutation;

    void validate() const {
        for (double p : {blur_prob, gray_prob, occlusion_prob, hflip_prob})
            if (!(p >= 0 && p <= 1)) throw ArgumentError("augment probabilities must lie in [0, 1]");
        if (rotation_deg < 0 || scale_jitter < 0 || scale_jitter >= 1 || translate_frac < 0)
            throw ArgumentError("augment ranges must be non-negative (scale jitter < 1)");
        if (blur_sigma_min <= 0 || blur_sigma_max < blur_sigma_min) throw ArgumentError("bad blur sigma range");
        if (occlusion_min <= 0 || occlusion_max < occlusion_min || occlusion_max > 1)
            throw ArgumentError("bad occlusion size range");
        if (hflip_prob > 0 && flip_permutation.empty())
            throw ArgumentError("horizontal flip requires a landmark flip permutation");
        for (std::size_t i = 0; i < flip_permutation.size(); ++i) {
            const std::size_t j = flip_permutation[i];
            if (j >= flip_permutation.size() || flip_permutation[j] != i)
                throw ArgumentError("flip permutation is not an involution");
        }
    }

    /// Every random operation disabled.
    static AugmentPolicy none() {
        AugmentPolicy p;
        p.rotation_deg = p.scale_jitter = p.translate_frac = 0;
        p.blur_prob = p.gray_prob = p.occlusion_prob = p.hflip_prob = 0;
        return p;
    }
};

struct AugmentRecord {
    double angle_deg = 0, scale = 1, shift_x = 0, shift_y = 0;
    std::optional<double> blur_sigma;
    bool gray = false;
    bool occluded = false;
    bool flipped = false;
};

struct AugmentedSample {
    Tensor image;
    LandmarkSet landmarks;
    Affine transform;  // input crop coordinates -> augmented coordinates (before re-indexing)
    AugmentRecord record;
};

/// Generator for sample `index` of a run seeded with `seed`.
inline std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

inline Tensor gaussian_blur(const Tensor& img, double sigma) {
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<float> k(2 * radius + 1);
    float total = 0;
    for (int i = -radius; i <= radius; ++i) total += k[i + radius] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
    for (auto& v : k) v /= total;
    auto clampi = [](long v, long n) { return static_cast<std::size_t>(std::clamp(v, 0L, n - 1)); };
    Tensor tmp(img.shape()), out(img.shape());
    auto src = img.values();
    auto mid = tmp.mutable_values();
    auto dst = out.mutable_values();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                float acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * src[(ch * h + y) * w + clampi(static_cast<long>(x) + i, static_cast<long>(w))];
                mid[(ch * h + y) * w + x] = acc;
            }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                float acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * mid[(ch * h + clampi(static_cast<long>(y) + i, static_cast<long>(h))) * w + x];
                dst[(ch * h + y) * w + x] = acc;
            }
    return out;
}

inline Tensor to_grayscale(const Tensor& img) {
    const std::size_t plane = img.dim(1) * img.dim(2);
    Tensor out(img.shape());
    auto src = img.values();
    auto dst = out.mutable_values();
    for (std::size_t i = 0; i < plane; ++i) {
        const float l = 0.299f * src[i] + 0.587f * src[plane + i] + 0.114f * src[2 * plane + i];
        dst[i] = dst[plane + i] = dst[2 * plane + i] = l;
    }
    return out;
}

inline Tensor flip_horizontal(const Tensor& img) {
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor out(img.shape());
    auto src = img.values();
    auto dst = out.mutable_values();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) dst[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
    return out;
}

/// Rotation, scale and translation about the crop centre (one resample), then blur,
/// grayscale, occlusion and horizontal flip with their probabilities. Landmarks follow
/// every geometric step; a flip also re-indexes them through the flip permutation.
inline AugmentedSample augment(const Tensor& image, const LandmarkSet& landmarks, const AugmentPolicy& policy,
                               std::mt19937_64& rng) {
    policy.validate();
    const detail::F32 src(image);
    if (src->rank() != 3 || src->dim(0) != 3) throw ShapeError("augment expects [3,H,W]");
    const std::size_t h = src->dim(1), w = src->dim(2);
    if (policy.hflip_prob > 0 && policy.flip_permutation.size() != landmarks.size())
        throw ArgumentError("flip permutation size does not match landmark count");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    AugmentedSample out;
    auto& rec = out.record;
    rec.angle_deg = uniform(-policy.rotation_deg, policy.rotation_deg);
    rec.scale = std::max(1e-3, uniform(1 - policy.scale_jitter, 1 + policy.scale_jitter));
    rec.shift_x = uniform(-policy.translate_frac, policy.translate_frac) * static_cast<double>(w);
    rec.shift_y = uniform(-policy.translate_frac, policy.translate_frac) * static_cast<double>(h);
    const double cx = static_cast<double>(w) / 2, cy = static_cast<double>(h) / 2;
    const Affine geometric = Affine::translation(-cx, -cy)
                                 .then(Affine::rotation(rec.angle_deg * std::numbers::pi / 180.0))
                                 .then(Affine::scaling(rec.scale, rec.scale))
                                 .then(Affine::translation(cx + rec.shift_x, cy + rec.shift_y));
    Tensor img = warp_affine(*src, geometric, h, w);

    const double u_blur = unit(rng), sigma = uniform(policy.blur_sigma_min, policy.blur_sigma_max);
    if (u_blur < policy.blur_prob) {
        rec.blur_sigma = sigma;
        img = gaussian_blur(img, sigma);
    }
    if (unit(rng) < policy.gray_prob) {
        rec.gray = true;
        img = to_grayscale(img);
    }
    const double u_occ = unit(rng);
    const double ow = uniform(policy.occlusion_min, policy.occlusion_max) * static_cast<double>(w);
    const double oh = uniform(policy.occlusion_min, policy.occlusion_max) * static_cast<double>(h);
    const double ox = unit(rng) * (static_cast<double>(w) - ow), oy = unit(rng) * (static_cast<double>(h) - oh);
    if (u_occ < policy.occlusion_prob) {
        rec.occluded = true;
        auto v = img.mutable_values();
        const auto x0 = static_cast<std::size_t>(ox), y0 = static_cast<std::size_t>(oy);
        const auto x1 = std::min(w, x0 + static_cast<std::size_t>(std::ceil(ow)));
        const auto y1 = std::min(h, y0 + static_cast<std::size_t>(std::ceil(oh)));
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) v[(ch * h + y) * w + x] = static_cast<float>(unit(rng));
    }
    Affine total = geometric;
    LandmarkSet moved = transform(landmarks, geometric);
    if (unit(rng) < policy.hflip_prob) {
        rec.flipped = true;
        img = flip_horizontal(img);
        const Affine mirror{-1, 0, 0, 1, static_cast<double>(w), 0};
        total = total.then(mirror);
        const LandmarkSet mirrored = transform(moved, mirror);
        for (std::size_t i = 0; i < mirrored.size(); ++i) moved.points[policy.flip_permutation[i]] = mirrored.points[i];
    }
    out.image = std::move(img);
    out.landmarks = std::move(moved);
    out.transform = total;
    return out;
}

// ---------------------------------------------------------------------------
// Train / validation split
// ---------------------------------------------------------------------------

/// Deterministic 10:1 partition: |val| = round(n / 11). Each side keeps input order.
template <class T>
std::pair<std::vector<T>, std::vector<T>> split_train_val(const std::vector<T>& samples, std::uint64_t seed) {
    if (samples.size() < 11)
        throw ArgumentError("need at least 11 samples for a 10:1 split, got " + std::to_string(samples.size()));
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto val_count = static_cast<std::size_t>(std::llround(static_cast<double>(samples.size()) / 11.0));
    std::vector<bool> is_val(samples.size(), false);
    for (std::size_t i = 0; i < val_count; ++i) is_val[order[i]] = true;
    std::pair<std::vector<T>, std::vector<T>> out;
    for (std::size_t i = 0; i < samples.size(); ++i) (is_val[i] ? out.second : out.first).push_back(samples[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Teacher heatmaps: `.lmkw` files with tensors "point" [N,H,W] and "edge" [E,H,W]
// ---------------------------------------------------------------------------

inline HeatmapSet load_teacher_heatmaps(const std::filesystem::path& path, std::size_t num_landmarks,
                                        std::size_t num_edges, std::size_t size = 64) {
    const WeightStore store = load(path);
    HeatmapSet set;
    for (const char* name : {"point", "edge"}) {
        if (!store.contains(name)) throw MissingTensorError(name);
        const std::size_t channels = std::string(name) == "point" ? num_landmarks : num_edges;
        const Tensor t = store.get(name).to_f32();
        if (t.shape() != Shape{channels, size, size})
            throw ShapeError(path.string() + ": tensor '" + name + "' has shape " + to_string(t.shape()) +
                             ", expected " + to_string({channels, size, size}));
        for (float v : t.values())
            if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite value in '" + name + "'");
        (std::string(name) == "point" ? set.point : set.edge) = t;
    }
    return set;
}

inline void save_teacher_heatmaps(const HeatmapSet& set, const std::filesystem::path& path) {
    WeightStore store;
    store.add("point", set.point);
    store.add("edge", set.edge);
    save(store, path);
}

} // namespace lmk
