#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <ostream>
#include <stdexcept>
#include <string>

namespace hsds {

using Index = Eigen::Index;

/// NCHW extent of a dense tensor.
struct Shape {
  Index n = 1;
  Index c = 1;
  Index h = 1;
  Index w = 1;

  Index size() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  Index sample() const { return c * h * w; }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
  }
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) { return os << s.str(); }

class ShapeMismatch : public std::invalid_argument {
 public:
  ShapeMismatch(const std::string& where, const Shape& a, const Shape& b)
      : std::invalid_argument(where + ": shape mismatch " + a.str() + " vs " + b.str()) {}
  explicit ShapeMismatch(const std::string& what) : std::invalid_argument(what) {}
};

/// Dense NCHW tensor backed by a contiguous Eigen array.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Array::Zero(shape.size())) {}
  Tensor(const Shape& shape, Scalar fill) : shape_(shape), data_(Array::Constant(shape.size(), fill)) {}
  Tensor(const Shape& shape, Array data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) throw ShapeMismatch("Tensor: data size does not match " + shape_.str());
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar item() const {
    if (size() != 1) throw ShapeMismatch("Tensor::item on " + shape_.str());
    return data_[0];
  }

  /// Sample n viewed as a (C, H*W) row-major matrix.
  MatrixMap sample_matrix(Index n) {
    return MatrixMap(data_.data() + n * shape_.sample(), shape_.c, shape_.plane());
  }
  ConstMatrixMap sample_matrix(Index n) const {
    return ConstMatrixMap(data_.data() + n * shape_.sample(), shape_.c, shape_.plane());
  }

  /// Channel plane (n, c) viewed as an (H, W) row-major matrix.
  MatrixMap plane(Index n, Index c) {
    return MatrixMap(data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.h, shape_.w);
  }
  ConstMatrixMap plane(Index n, Index c) const {
    return ConstMatrixMap(data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.h, shape_.w);
  }

  Tensor reshaped(const Shape& s) const {
    if (s.size() != shape_.size()) throw ShapeMismatch("Tensor::reshaped", shape_, s);
    return Tensor(s, data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  Shape shape_{0, 0, 0, 0};
  Array data_;
};

}  // namespace hsds
