#include "afuse/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "afuse/errors.hpp"

namespace afuse {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int extent : shape) {
    n *= static_cast<std::size_t>(extent);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (int extent : shape) {
    if (extent <= 0) {
      throw ValidationError("tensor extents must be positive, got " + to_string(shape));
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_ = Array::Constant(static_cast<Eigen::Index>(numel(shape_)), fill);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (numel(shape_) != static_cast<std::size_t>(data_.size())) {
    throw ValidationError("tensor of shape " + to_string(shape_) + " cannot hold " +
                          std::to_string(data_.size()) + " values");
  }
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::initializer_list<Scalar> values)
    : Tensor(std::move(shape),
             Array(Eigen::Map<const Array>(values.begin(), static_cast<Eigen::Index>(values.size())))) {}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (data_.size() != 1) {
    throw ValidationError("item() on tensor of shape " + to_string(shape_));
  }
  return data_[0];
}

template <typename Scalar>
bool Tensor<Scalar>::all_finite() const {
  return data_.allFinite();
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ValidationError("max_abs_diff: shapes " + to_string(a.shape()) + " and " +
                          to_string(b.shape()) + " differ");
  }
  if (a.empty()) {
    return Scalar(0);
  }
  return (a.array() - b.array()).abs().maxCoeff();
}

template class Tensor<float>;
template class Tensor<double>;
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace afuse
