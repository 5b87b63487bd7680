/*
 * Copyright 2026 The peftlab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "peftlab/errors.hpp"

namespace peftlab {

/// Dense row-major 2-D array of doubles with an optional gradient buffer.
///
/// Matrices are the only tensor rank in this library: a token sequence is an
/// m x d matrix, a batch is a list of matrices. Everything is double
/// precision. Gradients accumulate additively; callers zero them between
/// optimizer steps.
class Matrix2D {
 public:
  Matrix2D() = default;
  Matrix2D(int rows, int cols);  // zero-initialized

  static Matrix2D zeros(int rows, int cols);
  static Matrix2D constant(int rows, int cols, double value);
  static Matrix2D identity(int n);
  static Matrix2D from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix2D gaussian(int rows, int cols, double stddev, std::mt19937_64& rng);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int size() const { return rows_ * cols_; }

  double& at(int r, int c) { return values_[static_cast<size_t>(r) * cols_ + c]; }
  double at(int r, int c) const { return values_[static_cast<size_t>(r) * cols_ + c]; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  /// True once a gradient buffer has been allocated.
  bool has_grad() const { return !grad_.empty(); }
  /// Gradient buffer; allocated zero-filled on first access.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  /// Zero the gradient buffer (keeps the allocation).
  void zero_grad();
  /// Drop the gradient buffer entirely.
  void drop_grad() { grad_.clear(); }

  bool same_shape(const Matrix2D& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_str() const;

  /// Throws NonFiniteError naming `op` if any stored value is NaN/Inf.
  void check_finite(const char* op) const;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> values_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
};

/// Shared handle used by the tape and by parameter owners.
using MatrixRef = std::shared_ptr<Matrix2D>;

inline MatrixRef make_matrix(Matrix2D m) {
  return std::make_shared<Matrix2D>(std::move(m));
}

/// A parameter with a stable diagnostic name ("layer3.att.w_down", ...).
struct NamedParam {
  std::string name;
  MatrixRef value;
};

/// FNV-1a over the raw bytes of the stored values; bitwise-sensitive.
uint64_t checksum(const Matrix2D& m);

/// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Matrix2D& a, const Matrix2D& b);

}  // namespace peftlab
