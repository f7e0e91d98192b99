#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rattn/error.hpp"

namespace rattn {

/// Dense NHWC extent: batch, height, width, channels (channels fastest).
/// Vectors are stored as (n, 1, 1, features).
struct Shape {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;

  std::size_t size() const { return n * h * w * c; }
  std::size_t pixels() const { return h * w; }
  std::size_t sample() const { return h * w * c; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.size()) {
      throw InvalidInput("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator()(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
    return data_[((n * shape_.h + h) * shape_.w + w) * shape_.c + c];
  }
  const T& operator()(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const {
    return data_[((n * shape_.h + h) * shape_.w + w) * shape_.c + c];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Contiguous h*w*c block of sample n.
  T* sample(std::size_t n) { return data_.data() + n * shape_.sample(); }
  const T* sample(std::size_t n) const { return data_.data() + n * shape_.sample(); }
  /// Channel vector at one pixel.
  T* pixel(std::size_t n, std::size_t h, std::size_t w) {
    return data_.data() + ((n * shape_.h + h) * shape_.w + w) * shape_.c;
  }
  const T* pixel(std::size_t n, std::size_t h, std::size_t w) const {
    return data_.data() + ((n * shape_.h + h) * shape_.w + w) * shape_.c;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(Shape s) {
    if (s.size() != data_.size()) {
      throw InvalidInput("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    }
    shape_ = s;
  }

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
using FeatureMap = Tensor<T>;

/// Shape for a batch of `n` feature vectors of length `features`.
inline Shape vec_shape(std::size_t n, std::size_t features) { return {n, 1, 1, features}; }

/// Converts between scalar types (used to load float checkpoints into double models).
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> v(t.values().begin(), t.values().end());
  return Tensor<To>(t.shape(), std::move(v));
}

}  // namespace rattn
