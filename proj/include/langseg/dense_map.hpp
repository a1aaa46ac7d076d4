#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>

#include "langseg/errors.hpp"

namespace langseg {

using Index = Eigen::Index;

// Row-major (pixels x channels) storage; a pixel's channel vector is contiguous.
template <typename Scalar>
using PixelMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A height x width x channels array of reals in row-major (h, w, c) order.
///
/// Internally this is a (height*width) x channels row-major Eigen matrix, so
/// `matrix()` exposes the per-pixel channel vectors as rows and the whole map
/// composes with ordinary Eigen expressions.
template <typename Scalar>
class DenseMap {
 public:
  using Matrix = PixelMatrix<Scalar>;

  DenseMap() = default;

  DenseMap(Index height, Index width, Index channels)
      : height_(height), width_(width), channels_(channels) {
    if (height < 0 || width < 0 || channels < 0) {
      throw ShapeError("negative DenseMap dimension");
    }
    values_ = Matrix::Zero(height * width, channels);
  }

  DenseMap(Index height, Index width, Index channels, Matrix values)
      : height_(height), width_(width), channels_(channels), values_(std::move(values)) {
    if (values_.rows() != height * width || values_.cols() != channels) {
      throw ShapeError("DenseMap values do not match " + shape_string());
    }
  }

  static DenseMap Constant(Index height, Index width, Index channels, Scalar value) {
    DenseMap out(height, width, channels);
    out.values_.setConstant(value);
    return out;
  }

  static DenseMap Scalar1(Scalar value) { return Constant(1, 1, 1, value); }

  Index height() const { return height_; }
  Index width() const { return width_; }
  Index channels() const { return channels_; }
  Index pixels() const { return height_ * width_; }
  Index size() const { return height_ * width_ * channels_; }

  Scalar& operator()(Index h, Index w, Index c) { return values_(h * width_ + w, c); }
  const Scalar& operator()(Index h, Index w, Index c) const { return values_(h * width_ + w, c); }

  Matrix& matrix() { return values_; }
  const Matrix& matrix() const { return values_; }

  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> flat() {
    return {values_.data(), size()};
  }
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> flat() const {
    return {values_.data(), size()};
  }

  bool same_shape(const DenseMap& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }

  bool all_finite() const { return values_.allFinite(); }

  template <typename Other>
  DenseMap<Other> cast() const {
    return DenseMap<Other>(height_, width_, channels_, values_.template cast<Other>());
  }

  std::string shape_string() const {
    std::ostringstream s;
    s << height_ << "x" << width_ << "x" << channels_;
    return s.str();
  }

  friend bool operator==(const DenseMap& a, const DenseMap& b) {
    return a.same_shape(b) && a.values_ == b.values_;
  }

 private:
  Index height_ = 0;
  Index width_ = 0;
  Index channels_ = 0;
  Matrix values_;
};

// Per-pixel integer labels (ground truth or prediction), height x width.
using LabelMap = Eigen::Array<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using DenseMapf = DenseMap<float>;
using DenseMapd = DenseMap<double>;

}  // namespace langseg
