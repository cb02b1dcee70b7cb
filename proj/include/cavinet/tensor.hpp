#pragma once

#include <Eigen/Core>

#include <cstring>
#include <initializer_list>
#include <type_traits>

#include "cavinet/common.hpp"
#include "cavinet/rng.hpp"

namespace cavinet {

// Dense n-dimensional array in row-major order, backed by an Eigen vector.
// This is the universal value type: images, activations, parameters and
// gradients are all Tensors. Scalar is double in test builds and may be
// float in training builds.
template <class Scalar>
class Tensor {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap =
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap = Eigen::Map<
      const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_ = Storage::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (shape_size(shape_) != data_.size())
      raise<ShapeError>("tensor: shape ", shape_str(shape_), " does not match ",
                        data_.size(), " values");
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static Tensor ones(Shape shape) { return constant(std::move(shape), Scalar(1)); }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(values.size()) != t.size())
      raise<ShapeError>("tensor: ", values.size(), " values for shape ",
                        shape_str(t.shape_));
    Index i = 0;
    for (Scalar v : values) t.data_[i++] = v;
    return t;
  }

  static Tensor uniform(Shape shape, RandomStream& rng, double lo = -1.0,
                        double hi = 1.0) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i)
      t.data_[i] = static_cast<Scalar>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor gaussian(Shape shape, RandomStream& rng, double mean = 0.0,
                         double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i)
      t.data_[i] = static_cast<Scalar>(rng.normal(mean, stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& operator()(Index i0) { return data_[offset({i0})]; }
  Scalar& operator()(Index i0, Index i1) { return data_[offset({i0, i1})]; }
  Scalar& operator()(Index i0, Index i1, Index i2) { return data_[offset({i0, i1, i2})]; }
  Scalar& operator()(Index i0, Index i1, Index i2, Index i3) {
    return data_[offset({i0, i1, i2, i3})];
  }
  Scalar operator()(Index i0) const { return data_[offset({i0})]; }
  Scalar operator()(Index i0, Index i1) const { return data_[offset({i0, i1})]; }
  Scalar operator()(Index i0, Index i1, Index i2) const {
    return data_[offset({i0, i1, i2})];
  }
  Scalar operator()(Index i0, Index i1, Index i2, Index i3) const {
    return data_[offset({i0, i1, i2, i3})];
  }

  // Flat views for expression-style math.
  ArrayMap array() { return ArrayMap(data_.data(), data_.size()); }
  ConstArrayMap array() const { return ConstArrayMap(data_.data(), data_.size()); }
  auto vector() { return Eigen::Map<Storage>(data_.data(), data_.size()); }
  auto vector() const {
    return Eigen::Map<const Storage>(data_.data(), data_.size());
  }

  // Row-major 2-d view over the flat data.
  MatrixMap matrix(Index rows, Index cols) {
    if (rows * cols != size())
      raise<ShapeError>("tensor: cannot view ", shape_str(shape_), " as ", rows, "x",
                        cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    if (rows * cols != size())
      raise<ShapeError>("tensor: cannot view ", shape_str(shape_), " as ", rows, "x",
                        cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  void reshape(Shape shape) {
    validate_shape(shape);
    if (shape_size(shape) != size())
      raise<ShapeError>("tensor: reshape ", shape_str(shape_), " -> ",
                        shape_str(shape), " changes element count");
    shape_ = std::move(shape);
  }

  Tensor reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape(std::move(shape));
    return t;
  }

  bool all_finite() const { return data_.allFinite(); }

  void set_zero() { data_.setZero(); }

  Index offset(std::initializer_list<Index> idx) const {
    if (static_cast<Index>(idx.size()) != rank())
      raise<ShapeError>("tensor: ", idx.size(), "-d index into ", shape_str(shape_));
    Index off = 0;
    std::size_t k = 0;
    for (Index i : idx) {
      off = off * shape_[k] + i;
      ++k;
    }
    return off;
  }

 private:
  static void validate_shape(const Shape& s) {
    for (Index d : s)
      if (d <= 0) raise<ShapeError>("tensor: non-positive dimension in ", shape_str(s));
  }

  Shape shape_;
  Storage data_;
};

template <class Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(),
                     sizeof(Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace cavinet
