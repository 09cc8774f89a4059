// Copyright 2026 The SSM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstring>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ssm/error.hpp"

namespace ssm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major tensor of doubles.
///
/// Rank-2 tensors are the working currency of the tape; vectors are usually
/// carried as 1 x n matrices. Rank-3 tensors only appear in datasets.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_)) {
      throw InvalidArgument("tensor value count " + std::to_string(values_.size()) +
                            " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }
  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::size_t rows() const {
    require_rank2();
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank2();
    return shape_[1];
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& storage() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  std::span<double> row_span(std::size_t r) { return {values_.data() + r * shape_[1], shape_[1]}; }
  std::span<const double> row_span(std::size_t r) const {
    return {values_.data() + r * shape_[1], shape_[1]};
  }

  MatrixMap mat() {
    require_rank2();
    return MatrixMap(values_.data(), static_cast<Eigen::Index>(shape_[0]),
                     static_cast<Eigen::Index>(shape_[1]));
  }
  ConstMatrixMap mat() const {
    require_rank2();
    return ConstMatrixMap(values_.data(), static_cast<Eigen::Index>(shape_[0]),
                          static_cast<Eigen::Index>(shape_[1]));
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  Tensor transposed() const {
    Tensor out = Tensor::matrix(cols(), rows());
    out.mat() = mat().transpose();
    return out;
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), values_); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  void require_rank2() const {
    if (shape_.size() != 2) throw InvalidArgument("expected a matrix, got shape " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<double> values_;
};

/// Bitwise comparison (distinguishes -0.0 and NaN payloads).
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline double frobenius_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw InvalidArgument("frobenius_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

enum class ParamGroup { encoder, head };

inline const char* to_string(ParamGroup g) { return g == ParamGroup::encoder ? "encoder" : "head"; }

/// A named model weight with its gradient buffer.
///
/// `trainable == false` marks frozen weights: they are recorded on the tape
/// as constants and the optimizer never touches them.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor value_, ParamGroup group_, bool trainable_ = true)
      : name(std::move(name_)),
        value(std::move(value_)),
        grad(value.shape()),
        group(group_),
        trainable(trainable_) {}

  void zero_grad() {
    grad.fill(0.0);
    has_grad = false;
  }

  std::string name;
  Tensor value;
  Tensor grad;
  ParamGroup group = ParamGroup::head;
  bool trainable = true;
  /// Set when a backward pass reached this parameter since the last zero_grad.
  bool has_grad = false;
};

}  // namespace ssm
