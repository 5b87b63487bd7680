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
#include "peftlab/matrix.hpp"

#include <cmath>
#include <cstring>

namespace peftlab {

Matrix2D::Matrix2D(int rows, int cols) : rows_(rows), cols_(cols) {
  if (rows < 0 || cols < 0) {
    throw ShapeError("Matrix2D: negative shape " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  values_.assign(static_cast<size_t>(rows) * cols, 0.0);
}

Matrix2D Matrix2D::zeros(int rows, int cols) { return Matrix2D(rows, cols); }

Matrix2D Matrix2D::constant(int rows, int cols, double value) {
  Matrix2D m(rows, cols);
  for (auto& v : m.values_) v = value;
  return m;
}

Matrix2D Matrix2D::identity(int n) {
  Matrix2D m(n, n);
  for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

Matrix2D Matrix2D::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const int r = static_cast<int>(rows.size());
  const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
  Matrix2D m(r, c);
  int i = 0;
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) {
      throw ShapeError("Matrix2D::from_rows: ragged row " + std::to_string(i));
    }
    int j = 0;
    for (double v : row) m.at(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix2D Matrix2D::gaussian(int rows, int cols, double stddev, std::mt19937_64& rng) {
  Matrix2D m(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : m.values_) v = dist(rng);
  return m;
}

std::vector<double>& Matrix2D::grad() {
  if (grad_.empty()) grad_.assign(values_.size(), 0.0);
  return grad_;
}

const std::vector<double>& Matrix2D::grad() const {
  if (grad_.empty()) {
    throw Error("Matrix2D::grad: no gradient buffer allocated");
  }
  return grad_;
}

void Matrix2D::zero_grad() {
  if (!grad_.empty()) grad_.assign(values_.size(), 0.0);
}

std::string Matrix2D::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Matrix2D::check_finite(const char* op) const {
  for (double v : values_) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op) + ": non-finite value in " + shape_str() +
                           " output");
    }
  }
}

uint64_t checksum(const Matrix2D& m) {
  uint64_t h = 14695981039346656037ull;
  for (double v : m.values()) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

double max_abs_diff(const Matrix2D& a, const Matrix2D& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: shapes " + a.shape_str() + " vs " + b.shape_str());
  }
  double worst = 0.0;
  for (size_t i = 0; i < a.values().size(); ++i) {
    worst = std::max(worst, std::fabs(a.values()[i] - b.values()[i]));
  }
  return worst;
}

}  // namespace peftlab
