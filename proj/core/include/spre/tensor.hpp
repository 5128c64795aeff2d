#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spre/error.hpp"

namespace spre {

/// Shape of a convolution weight: (out-channel, in-channel, kernel-h, kernel-w).
struct Shape4 {
  std::size_t c_out = 0;
  std::size_t c_in = 0;
  std::size_t k_h = 0;
  std::size_t k_w = 0;

  std::size_t size() const noexcept { return c_out * c_in * k_h * k_w; }
  std::size_t spatial() const noexcept { return k_h * k_w; }
  std::string to_string() const;

  friend bool operator==(const Shape4&, const Shape4&) = default;
};

/// Dense 4-D weight tensor, row-major with c_out outermost and k_w innermost.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  explicit Tensor4(Shape4 shape, T fill = T{0});
  Tensor4(Shape4 shape, std::vector<T> data);

  const Shape4& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t index(std::size_t o, std::size_t i, std::size_t u,
                    std::size_t v) const noexcept {
    return ((o * shape_.c_in + i) * shape_.k_h + u) * shape_.k_w + v;
  }

  T& at(std::size_t o, std::size_t i, std::size_t u, std::size_t v) noexcept {
    return data_[index(o, i, u, v)];
  }
  T at(std::size_t o, std::size_t i, std::size_t u,
       std::size_t v) const noexcept {
    return data_[index(o, i, u, v)];
  }

  T& operator[](std::size_t flat) noexcept { return data_[flat]; }
  T operator[](std::size_t flat) const noexcept { return data_[flat]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Shape4 shape_;
  std::vector<T> data_;
};

/// Binary mask with the same layout as Tensor4; one byte per position.
class Mask4 {
 public:
  Mask4() = default;
  explicit Mask4(Shape4 shape, bool fill = false);
  Mask4(Shape4 shape, std::vector<std::uint8_t> bits);

  static Mask4 ones(Shape4 shape) { return Mask4(shape, true); }
  static Mask4 zeros(Shape4 shape) { return Mask4(shape, false); }

  const Shape4& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return bits_.size(); }

  std::size_t index(std::size_t o, std::size_t i, std::size_t u,
                    std::size_t v) const noexcept {
    return ((o * shape_.c_in + i) * shape_.k_h + u) * shape_.k_w + v;
  }

  bool at(std::size_t o, std::size_t i, std::size_t u,
          std::size_t v) const noexcept {
    return bits_[index(o, i, u, v)] != 0;
  }
  void set(std::size_t o, std::size_t i, std::size_t u, std::size_t v,
           bool on) noexcept {
    bits_[index(o, i, u, v)] = on ? 1 : 0;
  }

  bool operator[](std::size_t flat) const noexcept { return bits_[flat] != 0; }
  void set(std::size_t flat, bool on) noexcept { bits_[flat] = on ? 1 : 0; }

  std::span<const std::uint8_t> bits() const noexcept { return bits_; }

  friend bool operator==(const Mask4&, const Mask4&) = default;

 private:
  Shape4 shape_;
  std::vector<std::uint8_t> bits_;
};

/// Batched channel-first activation tensor (n, c, h, w).
template <typename T>
class FeatureMap {
 public:
  using value_type = T;

  FeatureMap() = default;
  FeatureMap(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
             T fill = T{0});
  FeatureMap(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
             std::vector<T> data);

  std::size_t n() const noexcept { return n_; }
  std::size_t c() const noexcept { return c_; }
  std::size_t h() const noexcept { return h_; }
  std::size_t w() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t plane() const noexcept { return h_ * w_; }
  std::string shape_string() const;
  bool same_shape(const FeatureMap& other) const noexcept {
    return n_ == other.n_ && c_ == other.c_ && h_ == other.h_ && w_ == other.w_;
  }

  std::size_t index(std::size_t b, std::size_t ch, std::size_t y,
                    std::size_t x) const noexcept {
    return ((b * c_ + ch) * h_ + y) * w_ + x;
  }
  T& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) noexcept {
    return data_[index(b, ch, y, x)];
  }
  T at(std::size_t b, std::size_t ch, std::size_t y,
       std::size_t x) const noexcept {
    return data_[index(b, ch, y, x)];
  }

  T& operator[](std::size_t flat) noexcept { return data_[flat]; }
  T operator[](std::size_t flat) const noexcept { return data_[flat]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  std::size_t n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> data_;
};

/// Row-major 2-D matrix; used for the classifier head and its activations.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{0})
      : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) noexcept {
    return data[r * cols + c];
  }
  T operator()(std::size_t r, std::size_t c) const noexcept {
    return data[r * cols + c];
  }
};

/// output[i] = w[i] * b[i].
template <typename T>
Tensor4<T> apply_mask(const Tensor4<T>& w, const Mask4& b);

std::size_t count_nonzero(const Mask4& b);

/// True iff a[i] <= b[i] at every position.
bool subset_of(const Mask4& a, const Mask4& b);

/// Converts between precisions; used when checkpoints and runs differ.
template <typename To, typename From>
Tensor4<To> tensor_cast(const Tensor4<From>& t) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return Tensor4<To>(t.shape(), std::move(out));
}

void require_same_shape(const Shape4& a, const Shape4& b, const char* what);

}  // namespace spre
