#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <span>
#include <string>

#include "neas/errors.hpp"

namespace neas {

/// NCHW shape. Two-dimensional data (batch x features) uses h = w = 1.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 1;
  int w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  int plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Dense row-major NCHW tensor. Each (sample, channel) plane is contiguous,
/// so one sample maps onto a column-major (H*W) x C Eigen matrix.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using Storage = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  using SampleMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;
  using ConstSampleMap =
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(shape), values_(Storage::Zero(
      static_cast<Eigen::Index>(shape.size()))) {}
  Tensor(int n, int c, int h = 1, int w = 1) : Tensor(Shape{n, c, h, w}) {}

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return shape_.size(); }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  std::span<T> values() { return {values_.data(), size()}; }
  std::span<const T> values() const { return {values_.data(), size()}; }
  Storage& storage() { return values_; }
  const Storage& storage() const { return values_; }

  T& operator()(int n, int c, int y, int x) {
    return values_[index(n, c, y, x)];
  }
  T operator()(int n, int c, int y, int x) const {
    return values_[index(n, c, y, x)];
  }
  // Row access for 2-D tensors.
  T& operator()(int n, int c) { return values_[index(n, c, 0, 0)]; }
  T operator()(int n, int c) const { return values_[index(n, c, 0, 0)]; }

  T* plane(int n, int c) {
    return values_.data() + index(n, c, 0, 0);
  }
  const T* plane(int n, int c) const {
    return values_.data() + index(n, c, 0, 0);
  }

  SampleMap sample(int n) {
    return SampleMap(plane(n, 0), shape_.plane(), shape_.c);
  }
  ConstSampleMap sample(int n) const {
    return ConstSampleMap(plane(n, 0), shape_.plane(), shape_.c);
  }

  void set_zero() { values_.setZero(); }
  bool all_finite() const { return values_.allFinite(); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    out.storage() = values_.template cast<U>();
    return out;
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && values_ == o.values_;
  }

 private:
  Eigen::Index index(int n, int c, int y, int x) const {
    return ((static_cast<Eigen::Index>(n) * shape_.c + c) * shape_.h + y) *
               shape_.w + x;
  }

  Shape shape_;
  Storage values_;
};

template <typename T>
void require_shape(const Tensor<T>& t, int channels, const std::string& where) {
  if (t.c() != channels) {
    throw ShapeError(where + ": expected " + std::to_string(channels) +
                     " channels, got shape " + t.shape().str());
  }
}

}  // namespace neas
