#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lmk/error.hpp"

namespace lmk {

inline constexpr std::size_t kMaxRank = 6;

enum class DType : std::uint8_t { f32 = 0, f16 = 1 };

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline Shape row_major_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

inline void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > kMaxRank)
        throw ShapeError("tensor rank " + std::to_string(shape.size()) + " outside [1, 6]");
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (shape[i] == 0)
            throw ShapeError("axis " + std::to_string(i) + " has zero extent in " + to_string(shape));
}

inline std::uint16_t float_to_half_bits(float v) {
    return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(v));
}

inline float half_bits_to_float(std::uint16_t bits) {
    return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

/// Dense row-major tensor of rank 1..6.
///
/// f32 tensors own a float buffer. f16 tensors own raw half-precision bit patterns
/// and exist for storage only: arithmetic goes through to_f32().
class Tensor {
public:
    Tensor() : shape_{1}, f32_(1, 0.0f) {}

    explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
        check_shape(shape_);
        f32_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), f32_(std::move(values)) {
        check_shape(shape_);
        if (f32_.size() != shape_numel(shape_))
            throw ShapeError("tensor of shape " + to_string(shape_) + " needs " +
                             std::to_string(shape_numel(shape_)) + " values, got " +
                             std::to_string(f32_.size()));
    }

    static Tensor from_half_bits(Shape shape, std::vector<std::uint16_t> bits) {
        Tensor t;
        check_shape(shape);
        if (bits.size() != shape_numel(shape))
            throw ShapeError("f16 tensor of shape " + to_string(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values");
        t.shape_ = std::move(shape);
        t.dtype_ = DType::f16;
        t.f32_.clear();
        t.f16_ = std::move(bits);
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return shape_numel(shape_); }
    DType dtype() const noexcept { return dtype_; }

    std::size_t dim(int axis) const { return shape_[normalize_axis(axis)]; }

    std::size_t normalize_axis(int axis) const {
        const int r = static_cast<int>(rank());
        const int a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r)
            throw ArgumentError("axis " + std::to_string(axis) + " out of range for rank " +
                                std::to_string(r));
        return static_cast<std::size_t>(a);
    }

    std::span<const float> values() const {
        require_f32();
        return f32_;
    }

    std::span<float> mutable_values() {
        require_f32();
        return f32_;
    }

    std::span<const std::uint16_t> half_bits() const {
        if (dtype_ != DType::f16) throw ArgumentError("tensor is not f16");
        return f16_;
    }

    float operator[](std::size_t flat) const {
        return dtype_ == DType::f32 ? f32_[flat] : half_bits_to_float(f16_[flat]);
    }

    float at(std::initializer_list<std::size_t> index) const { return (*this)[offset(index)]; }

    std::size_t offset(std::initializer_list<std::size_t> index) const {
        if (index.size() != rank()) throw ArgumentError("index rank mismatch");
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : index) {
            if (i >= shape_[axis]) throw ArgumentError("index out of bounds on axis " + std::to_string(axis));
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Tensor to_f32() const {
        if (dtype_ == DType::f32) return *this;
        std::vector<float> v(f16_.size());
        std::transform(f16_.begin(), f16_.end(), v.begin(), half_bits_to_float);
        return Tensor(shape_, std::move(v));
    }

    Tensor to_f16() const {
        if (dtype_ == DType::f16) return *this;
        std::vector<std::uint16_t> bits(f32_.size());
        std::transform(f32_.begin(), f32_.end(), bits.begin(), float_to_half_bits);
        return from_half_bits(shape_, std::move(bits));
    }

    /// Same data, new extents. Element count must match.
    Tensor reshaped(Shape shape) const {
        check_shape(shape);
        if (shape_numel(shape) != numel())
            throw ShapeError("cannot reshape " + to_string(shape_) + " into " + to_string(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    /// Bitwise equality of dtype, shape and payload.
    friend bool bit_equal(const Tensor& a, const Tensor& b) {
        if (a.dtype_ != b.dtype_ || a.shape_ != b.shape_) return false;
        if (a.dtype_ == DType::f16) return a.f16_ == b.f16_;
        return std::equal(a.f32_.begin(), a.f32_.end(), b.f32_.begin(), [](float x, float y) {
            return Eigen::numext::bit_cast<std::uint32_t>(x) == Eigen::numext::bit_cast<std::uint32_t>(y);
        });
    }

private:
    void require_f32() const {
        if (dtype_ != DType::f32) throw ArgumentError("f16 tensors are storage-only; call to_f32()");
    }

    Shape shape_;
    DType dtype_ = DType::f32;
    std::vector<float> f32_;
    std::vector<std::uint16_t> f16_;
};

namespace detail {

/// Holds an f32 view of a tensor, upcasting f16 storage on demand.
class F32 {
public:
    explicit F32(const Tensor& t) : ref_(t.dtype() == DType::f32 ? &t : nullptr) {
        if (!ref_) {
            owned_ = t.to_f32();
            ref_ = &owned_;
        }
    }
    F32(const F32&) = delete;
    F32& operator=(const F32&) = delete;

    const Tensor& operator*() const noexcept { return *ref_; }
    const Tensor* operator->() const noexcept { return ref_; }

private:
    const Tensor* ref_;
    Tensor owned_;
};

} // namespace detail

} // namespace lmk
