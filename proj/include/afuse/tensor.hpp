#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace afuse {

/// Extents of a dense tensor, outermost first. Images use (batch, channels, height, width).
using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense, contiguous, row-major tensor. Values are treated as immutable once
/// handed to a Tape; mutation is only done by the owner before that point.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, Array data);
  Tensor(Shape shape, std::initializer_list<Scalar> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), size()}; }
  std::span<const Scalar> values() const { return {data_.data(), size()}; }

  Scalar& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  Scalar operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  // NCHW element access; only valid for rank-4 tensors.
  Scalar& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  Scalar at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  /// The single value of a tensor holding exactly one element.
  Scalar item() const;

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, data_.template cast<To>().eval());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  Eigen::Index offset(int n, int c, int h, int w) const {
    return ((static_cast<Eigen::Index>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  Array data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Largest absolute elementwise difference; shapes must match.
template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

}  // namespace afuse
