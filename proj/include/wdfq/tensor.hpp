#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "wdfq/errors.hpp"

namespace wdfq {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major array of rank 1-4, last axis fastest. The carrier for every
// spatial and frequency feature in the pipeline.
template <typename Scalar>
class DenseTensor {
 public:
  using MatrixMap =
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using VectorMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
  using ConstVectorMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

  DenseTensor() = default;

  explicit DenseTensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(count(shape_)), Scalar(0));
  }

  DenseTensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (count(shape_) != static_cast<std::int64_t>(data_.size()))
      raise(ErrorCode::Shape, "data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
  }

  static DenseTensor full(Shape shape, Scalar value) {
    DenseTensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
  }

  static std::int64_t count(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  const Shape& shape() const { return shape_; }
  std::int64_t extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const Scalar& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Rank-specific indexing; callers are expected to know the rank.
  Scalar& at(std::int64_t i, std::int64_t j) { return data_[idx2(i, j)]; }
  const Scalar& at(std::int64_t i, std::int64_t j) const { return data_[idx2(i, j)]; }
  Scalar& at(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[idx3(i, j, k)]; }
  const Scalar& at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[idx3(i, j, k)];
  }
  Scalar& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[idx4(n, c, h, w)];
  }
  const Scalar& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[idx4(n, c, h, w)];
  }

  bool same_shape(const DenseTensor& o) const { return shape_ == o.shape_; }

  DenseTensor reshaped(Shape shape) const {
    if (count(shape) != size())
      raise(ErrorCode::Shape, "reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                  " changes element count");
    return DenseTensor(std::move(shape), data_);
  }

  // Eigen views over the flat storage.
  MatrixMap as_matrix(std::int64_t rows, std::int64_t cols) {
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap as_matrix(std::int64_t rows, std::int64_t cols) const {
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  VectorMap as_vector() { return VectorMap(data_.data(), size()); }
  ConstVectorMap as_vector() const { return ConstVectorMap(data_.data(), size()); }

  bool all_finite() const {
    for (Scalar v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  void validate_shape() const {
    if (shape_.empty() || shape_.size() > 4)
      raise(ErrorCode::Shape, "tensor rank must be 1-4, got " + shape_str(shape_));
    for (std::size_t a = 0; a < shape_.size(); ++a)
      if (shape_[a] <= 0)
        raise(ErrorCode::Shape,
              "axis " + std::to_string(a) + " has nonpositive extent in " + shape_str(shape_));
  }

  std::size_t idx2(std::int64_t i, std::int64_t j) const {
    return static_cast<std::size_t>(i * shape_[1] + j);
  }
  std::size_t idx3(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k);
  }
  std::size_t idx4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w);
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensor = DenseTensor<double>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    raise(ErrorCode::Shape, std::string(what) + ": shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()) + " differ");
}

}  // namespace wdfq
