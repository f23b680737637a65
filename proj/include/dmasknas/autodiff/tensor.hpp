#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmasknas/error.hpp"

namespace dmasknas {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major array. Feature maps use N x C x H x W.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + dmasknas::to_string(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }
  static Tensor vector(std::vector<T> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T item() const {
    if (data_.size() != 1)
      throw ShapeError("item() on tensor of shape " + dmasknas::to_string(shape_));
    return data_[0];
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != data_.size())
      throw ShapeError("cannot reshape " + dmasknas::to_string(shape_) + " to " +
                       dmasknas::to_string(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  Tensor& operator+=(const Tensor& o) {
    if (o.shape_ != shape_)
      throw ShapeError("accumulate " + dmasknas::to_string(o.shape_) + " into " +
                       dmasknas::to_string(shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_)
      if (d == 0)
        throw ShapeError("zero-sized dimension in " + dmasknas::to_string(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace dmasknas
