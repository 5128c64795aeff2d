#include "spre/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace spre {

std::string Shape4::to_string() const {
  std::ostringstream os;
  os << "(" << c_out << "," << c_in << "," << k_h << "," << k_w << ")";
  return os.str();
}

void require_same_shape(const Shape4& a, const Shape4& b, const char* what) {
  if (a != b) {
    throw Error(ErrorCode::kShapeMismatch, std::string(what) + ": shape " +
                                               a.to_string() + " vs " +
                                               b.to_string());
  }
}

template <typename T>
Tensor4<T>::Tensor4(Shape4 shape, T fill)
    : shape_(shape), data_(shape.size(), fill) {}

template <typename T>
Tensor4<T>::Tensor4(Shape4 shape, std::vector<T> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "Tensor4: data length " + std::to_string(data_.size()) +
                    " does not match shape " + shape_.to_string());
  }
}

template <typename T>
bool Tensor4<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](T x) { return std::isfinite(x); });
}

Mask4::Mask4(Shape4 shape, bool fill)
    : shape_(shape), bits_(shape.size(), fill ? 1 : 0) {}

Mask4::Mask4(Shape4 shape, std::vector<std::uint8_t> bits)
    : shape_(shape), bits_(std::move(bits)) {
  if (bits_.size() != shape_.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "Mask4: bit count " + std::to_string(bits_.size()) +
                    " does not match shape " + shape_.to_string());
  }
  for (auto b : bits_) {
    if (b > 1) {
      throw Error(ErrorCode::kInvalidArgument,
                  "Mask4: entries must be 0 or 1, got " + std::to_string(b));
    }
  }
}

template <typename T>
FeatureMap<T>::FeatureMap(std::size_t n, std::size_t c, std::size_t h,
                          std::size_t w, T fill)
    : n_(n), c_(c), h_(h), w_(w), data_(n * c * h * w, fill) {}

template <typename T>
FeatureMap<T>::FeatureMap(std::size_t n, std::size_t c, std::size_t h,
                          std::size_t w, std::vector<T> data)
    : n_(n), c_(c), h_(h), w_(w), data_(std::move(data)) {
  if (data_.size() != n * c * h * w) {
    throw Error(ErrorCode::kShapeMismatch,
                "FeatureMap: data length " + std::to_string(data_.size()) +
                    " does not match shape " + shape_string());
  }
}

template <typename T>
std::string FeatureMap<T>::shape_string() const {
  std::ostringstream os;
  os << "(" << n_ << "," << c_ << "," << h_ << "," << w_ << ")";
  return os.str();
}

template <typename T>
Tensor4<T> apply_mask(const Tensor4<T>& w, const Mask4& b) {
  require_same_shape(w.shape(), b.shape(), "apply_mask");
  Tensor4<T> out(w.shape());
  auto src = w.data();
  auto dst = out.data();
  auto bits = b.bits();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = bits[i] ? src[i] : T{0};
  }
  return out;
}

std::size_t count_nonzero(const Mask4& b) {
  auto bits = b.bits();
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1));
}

bool subset_of(const Mask4& a, const Mask4& b) {
  require_same_shape(a.shape(), b.shape(), "subset_of");
  auto x = a.bits();
  auto y = b.bits();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > y[i]) return false;
  }
  return true;
}

template class Tensor4<float>;
template class Tensor4<double>;
template class FeatureMap<float>;
template class FeatureMap<double>;
template Tensor4<float> apply_mask(const Tensor4<float>&, const Mask4&);
template Tensor4<double> apply_mask(const Tensor4<double>&, const Mask4&);

}  // namespace spre
