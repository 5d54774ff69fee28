#pragma once

#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nmrwm/error.hpp"

namespace nmrwm::ad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s + "]";
}

/// Dense row-major n-dimensional array.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(element_count(shape_))) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_))
      throw UsageError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
  }

  static Tensor filled(Shape shape, Scalar value) {
    const Index n = element_count(shape);
    return Tensor(std::move(shape), Array::Constant(n, value));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  bool all_finite() const { return data_.allFinite(); }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != size())
      throw UsageError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

 private:
  Shape shape_;
  Array data_;
};

}  // namespace nmrwm::ad
