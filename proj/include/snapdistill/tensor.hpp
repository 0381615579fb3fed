#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "snapdistill/errors.hpp"

namespace snapdistill {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         [](Index a, Index b) { return a * b; });
}

std::string shape_string(const Shape& shape);

/// Dense row-major n-dimensional array. Values live in a flat Eigen array;
/// the last dimension varies fastest.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    values_ = Array::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Array values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape();
    if (values_.size() != shape_size(shape_)) {
      throw ContractViolation("tensor value count " + std::to_string(values_.size()) +
                              " does not match shape " + shape_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Array(Eigen::Map<const Array>(values.begin(),
                                                               static_cast<Index>(values.size())))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.values_.setConstant(value);
    return t;
  }
  static Tensor scalar(Scalar value) { return Tensor(Shape{}, Array::Constant(1, value)); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return values_.size(); }
  bool empty() const { return values_.size() == 0 && shape_.empty(); }

  Array& values() { return values_; }
  const Array& values() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }
  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  /// Scalar value of a single-element tensor.
  Scalar item() const {
    if (values_.size() != 1) throw ContractViolation("item() on tensor of shape " + shape_string(shape_));
    return values_[0];
  }

  /// View as a (rows x cols) row-major matrix; rows * cols must equal size().
  MatrixMap matrix(Index rows, Index cols) {
    if (rows * cols != size()) throw ContractViolation("matrix view does not cover tensor");
    return MatrixMap(values_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    if (rows * cols != size()) throw ContractViolation("matrix view does not cover tensor");
    return ConstMatrixMap(values_.data(), rows, cols);
  }
  /// Leading dimension by product of the rest.
  MatrixMap matrix() { return matrix(rank() > 0 ? shape_[0] : 1, rank() > 0 ? size() / std::max<Index>(shape_[0], 1) : 1); }
  ConstMatrixMap matrix() const {
    return matrix(rank() > 0 ? shape_[0] : 1, rank() > 0 ? size() / std::max<Index>(shape_[0], 1) : 1);
  }

  bool all_finite() const { return values_.isFinite().all(); }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), values_); }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, values_.template cast<To>());
  }

  /// Bitwise equality of shape and values.
  bool identical(const Tensor& other) const;

 private:
  void check_shape() const {
    for (Index d : shape_) {
      if (d <= 0) throw ContractViolation("non-positive dimension in shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  Array values_;
};

/// 64-bit FNV-1a over the raw bytes of the values (shape included).
template <typename Scalar>
std::uint64_t checksum(const Tensor<Scalar>& t, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace snapdistill
