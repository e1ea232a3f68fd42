#pragma once

// Non-overlapping patch extraction (unfold) and reassembly (fold).
//
// The fold-free variants use only reshape, split, squeeze/unsqueeze, rank-5 permute
// and concat, so they run on runtimes that lack unfold/fold and cap permute at five
// axes. The naive variants are direct index loops and serve as the reference.

#include <cstddef>
#include <string>
#include <vector>

#include "lmk/error.hpp"
#include "lmk/ops.hpp"
#include "lmk/tensor.hpp"

namespace lmk {

struct PatchSpec {
    std::size_t patch_h = 2;
    std::size_t patch_w = 2;

    std::size_t area() const { return patch_h * patch_w; }

    /// Throws unless `feature` is [B,C,H,W] with H, W divisible by the patch extents.
    void check(const Shape& feature) const {
        if (patch_h == 0 || patch_w == 0) throw ArgumentError("patch extents must be >= 1");
        if (feature.size() != 4) throw ShapeError("patch ops expect [B,C,H,W], got " + to_string(feature));
        if (feature[2] % patch_h != 0)
            throw ShapeError("height (axis 2) = " + std::to_string(feature[2]) + " not divisible by patch height " +
                             std::to_string(patch_h));
        if (feature[3] % patch_w != 0)
            throw ShapeError("width (axis 3) = " + std::to_string(feature[3]) + " not divisible by patch width " +
                             std::to_string(patch_w));
    }

    std::size_t num_patches(std::size_t h, std::size_t w) const { return (h / patch_h) * (w / patch_w); }
};

/// Rank-6 permutation performed as rank-5 permutes: slice along `split_axis`, squeeze it,
/// permute each slice with the induced order, unsqueeze at the axis's destination and
/// concatenate there. Never issues a rank-6 permute.
inline Tensor permute6_via_5d(const Tensor& x, const std::vector<std::size_t>& order, std::size_t split_axis = 5) {
    if (x.rank() != 6) throw ShapeError("permute6_via_5d expects a rank-6 tensor, got " + to_string(x.shape()));
    check_permutation(order, 6);
    if (split_axis >= 6) throw ArgumentError("split axis must be in 0..5");

    std::size_t dest = 0;
    while (order[dest] != split_axis) ++dest;
    std::vector<std::size_t> inner;
    for (std::size_t a : order)
        if (a != split_axis) inner.push_back(a > split_axis ? a - 1 : a);

    const int s = static_cast<int>(split_axis);
    std::vector<Tensor> pieces;
    for (const Tensor& slice : split(x, s, x.dim(s))) {
        pieces.push_back(unsqueeze(permute(squeeze(slice, s), inner), static_cast<int>(dest)));
    }
    return concat(pieces, static_cast<int>(dest));
}

/// [B,C,H,W] -> [B,C,patch_area,num_patches] via reshape/split/permute/concat.
inline Tensor unfold_foldfree(const Tensor& x, const PatchSpec& spec) {
    spec.check(x.shape());
    const auto& s = x.shape();
    const std::size_t nh = s[2] / spec.patch_h, nw = s[3] / spec.patch_w;
    // [B, C, nh, ph, nw, pw] -> [B, C, ph, pw, nh, nw]
    const Tensor grid = reshape(x, {s[0], s[1], nh, spec.patch_h, nw, spec.patch_w});
    const Tensor moved = permute6_via_5d(grid, {0, 1, 3, 5, 2, 4});
    return reshape(moved, {s[0], s[1], spec.area(), nh * nw});
}

/// Inverse of unfold_foldfree for a feature map of extent out_h x out_w.
inline Tensor fold_foldfree(const Tensor& patches, const PatchSpec& spec, std::size_t out_h, std::size_t out_w) {
    spec.check({1, 1, out_h, out_w});
    const auto& s = patches.shape();
    if (s.size() != 4) throw ShapeError("fold expects [B,C,patch_area,num_patches], got " + to_string(s));
    if (s[2] != spec.area())
        throw ShapeError("fold: patch area (axis 2) is " + std::to_string(s[2]) + ", spec says " +
                         std::to_string(spec.area()));
    if (s[3] != spec.num_patches(out_h, out_w))
        throw ShapeError("fold: patch count (axis 3) is " + std::to_string(s[3]) + ", expected " +
                         std::to_string(spec.num_patches(out_h, out_w)));
    const std::size_t nh = out_h / spec.patch_h, nw = out_w / spec.patch_w;
    const Tensor grid = reshape(patches, {s[0], s[1], spec.patch_h, spec.patch_w, nh, nw});
    const Tensor moved = permute6_via_5d(grid, {0, 1, 4, 2, 5, 3});
    return reshape(moved, {s[0], s[1], out_h, out_w});
}

/// Reference gather: out[b,c,py*pw+px, gy*nw+gx] = x[b,c,gy*ph+py, gx*pw+px].
inline Tensor unfold_naive(const Tensor& input, const PatchSpec& spec) {
    spec.check(input.shape());
    const detail::F32 x(input);
    const auto& s = x->shape();
    const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
    const std::size_t nh = H / spec.patch_h, nw = W / spec.patch_w;
    Tensor out(Shape{B, C, spec.area(), nh * nw});
    auto src = x->values();
    auto dst = out.mutable_values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t gy = 0; gy < nh; ++gy)
                for (std::size_t gx = 0; gx < nw; ++gx)
                    for (std::size_t py = 0; py < spec.patch_h; ++py)
                        for (std::size_t px = 0; px < spec.patch_w; ++px) {
                            const std::size_t k = py * spec.patch_w + px, n = gy * nw + gx;
                            dst[((b * C + c) * spec.area() + k) * nh * nw + n] =
                                src[((b * C + c) * H + gy * spec.patch_h + py) * W + gx * spec.patch_w + px];
                        }
    return out;
}

/// Reference scatter, inverse of unfold_naive.
inline Tensor fold_naive(const Tensor& input, const PatchSpec& spec, std::size_t out_h, std::size_t out_w) {
    spec.check({1, 1, out_h, out_w});
    const detail::F32 p(input);
    const auto& s = p->shape();
    if (s.size() != 4 || s[2] != spec.area() || s[3] != spec.num_patches(out_h, out_w))
        throw ShapeError("fold_naive: patches " + to_string(s) + " inconsistent with spec");
    const std::size_t B = s[0], C = s[1];
    const std::size_t nh = out_h / spec.patch_h, nw = out_w / spec.patch_w;
    Tensor out(Shape{B, C, out_h, out_w});
    auto src = p->values();
    auto dst = out.mutable_values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t gy = 0; gy < nh; ++gy)
                for (std::size_t gx = 0; gx < nw; ++gx)
                    for (std::size_t py = 0; py < spec.patch_h; ++py)
                        for (std::size_t px = 0; px < spec.patch_w; ++px) {
                            const std::size_t k = py * spec.patch_w + px, n = gy * nw + gx;
                            dst[((b * C + c) * out_h + gy * spec.patch_h + py) * out_w + gx * spec.patch_w + px] =
                                src[((b * C + c) * spec.area() + k) * nh * nw + n];
                        }
    return out;
}

} // namespace lmk
