#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gigaseg/error.hpp"

namespace gigaseg {

// (batch, channels, height, width). Every entry is >= 1.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) { return os << s.str(); }

inline void check_shape(const Shape& s) {
  if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0)
    throw ShapeError("tensor shape entries must be >= 1, got " + s.str());
  constexpr auto kMax = std::numeric_limits<std::size_t>::max();
  if (s.c > kMax / s.n || s.h > kMax / (s.n * s.c) || s.w > kMax / (s.n * s.c * s.h))
    throw ShapeError("tensor shape " + s.str() + " overflows the element count");
}

// Dense rank-4 array. Elements are stored batch-major, then channel, row,
// column: index(b, c, y, x) = ((b * C + c) * H + y) * W + x. Serialization
// writes exactly this order, so files are bit-reproducible.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape) {
    check_shape(shape_);
    data_.assign(shape_.numel(), fill);
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_.numel())
      throw ShapeError("tensor data has " + std::to_string(data_.size()) +
                       " elements, shape " + shape_.str() + " needs " +
                       std::to_string(shape_.numel()));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t bytes() const { return data_.size() * sizeof(T); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return ((b * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) { return data_[index(b, c, y, x)]; }
  const T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(b, c, y, x)];
  }

  // Pointer to row y of plane (b, c).
  T* row(std::size_t b, std::size_t c, std::size_t y) { return data_.data() + index(b, c, y, 0); }
  const T* row(std::size_t b, std::size_t c, std::size_t y) const {
    return data_.data() + index(b, c, y, 0);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape_ = shape_;
    out.data_.assign(data_.begin(), data_.end());
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  template <typename>
  friend class Tensor;

  Shape shape_{};
  std::vector<T> data_;
};

// Convolution geometry. Square stride; kernel >= stride guarantees every input
// pixel is covered with no padding.
struct ConvSpec {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  bool transposed = false;
  bool has_bias = true;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;

  void validate() const {
    if (stride < 1) throw ShapeError("conv stride must be >= 1");
    if (in_channels < 1 || out_channels < 1) throw ShapeError("conv channels must be >= 1");
    if (kernel_h < stride || kernel_w < stride)
      throw ShapeError("conv kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w) +
                       " is smaller than stride " + std::to_string(stride));
  }

  // Weight tensor shape. Conv: (out, in, kh, kw). Transposed conv:
  // (in, out, kh, kw), i.e. the same array as the conv it is the adjoint of.
  Shape weight_shape() const {
    return transposed ? Shape{in_channels, out_channels, kernel_h, kernel_w}
                      : Shape{out_channels, in_channels, kernel_h, kernel_w};
  }
  std::size_t weight_count() const { return kernel_h * kernel_w * in_channels * out_channels; }
};

// Output extent of a valid strided convolution along one axis.
inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   const char* axis = "extent") {
  if (in < kernel)
    throw DivisibilityError(std::string(axis) + " " + std::to_string(in) +
                            " is smaller than kernel " + std::to_string(kernel));
  if ((in - kernel) % stride != 0)
    throw DivisibilityError(std::string(axis) + " " + std::to_string(in) + " minus kernel " +
                            std::to_string(kernel) + " is not divisible by stride " +
                            std::to_string(stride));
  return (in - kernel) / stride + 1;
}

inline std::size_t tconv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride) {
  return (in - 1) * stride + kernel;
}

inline Shape conv_output_shape(const Shape& in, const ConvSpec& spec) {
  spec.validate();
  if (in.c != spec.in_channels)
    throw ShapeError("channel mismatch: input has " + std::to_string(in.c) +
                     " channels, conv expects " + std::to_string(spec.in_channels));
  if (spec.transposed)
    return {in.n, spec.out_channels, tconv_out_extent(in.h, spec.kernel_h, spec.stride),
            tconv_out_extent(in.w, spec.kernel_w, spec.stride)};
  return {in.n, spec.out_channels, conv_out_extent(in.h, spec.kernel_h, spec.stride, "height"),
          conv_out_extent(in.w, spec.kernel_w, spec.stride, "width")};
}

}  // namespace gigaseg
