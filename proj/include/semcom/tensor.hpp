#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "semcom/error.hpp"

namespace semcom {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array. A rank-0 tensor (empty shape) holds one scalar.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : shape_{0} {}

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " scalars");
    }
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

  static BasicTensor vector(std::vector<T> v) {
    const std::size_t n = v.size();
    return BasicTensor(Shape{n}, std::move(v));
  }

  template <typename U>
  static BasicTensor cast(const BasicTensor<U>& other) {
    std::vector<T> d(other.size());
    std::transform(other.data().begin(), other.data().end(), d.begin(),
                   [](U x) { return static_cast<T>(x); });
    return BasicTensor(other.shape(), std::move(d));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  // Copy of row r of a rank-2 tensor as a rank-1 tensor.
  BasicTensor row(std::size_t r) const {
    const std::size_t cols = shape_.at(1);
    return BasicTensor(Shape{cols},
                       std::vector<T>(data_.begin() + r * cols, data_.begin() + (r + 1) * cols));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
  }

  void check_finite(std::string_view what) const {
    if (!all_finite()) throw NonFiniteError(std::string(what) + ": non-finite value");
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

inline double l2_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace semcom
