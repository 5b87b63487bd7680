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

#include <functional>
#include <span>
#include <vector>

#include "peftlab/matrix.hpp"

namespace peftlab {

enum class Nonlinearity { relu, gelu };

const char* to_string(Nonlinearity kind);
Nonlinearity nonlinearity_from_string(const std::string& s);

/// tanh-approximation gelu: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
double gelu_scalar(double x);
double gelu_grad_scalar(double x);

/// Reverse-mode differentiation tape over Matrix2D values.
///
/// Each op computes its output eagerly, verifies it is finite, and, when any
/// input requires a gradient, records a backward rule. backward(loss) replays
/// the rules in reverse recorded order, accumulating additively into the
/// grad buffer of every requires_grad matrix reachable from the loss.
/// Single-writer: one tape, one thread.
class Tape {
 public:
  // -- elementwise / mixing --------------------------------------------------
  MatrixRef add(const MatrixRef& a, const MatrixRef& b);
  /// alpha*x + beta*y; gradient scales by alpha and beta respectively.
  MatrixRef affine_mix(const MatrixRef& x, const MatrixRef& y, double alpha, double beta);
  MatrixRef scale(const MatrixRef& x, double c);
  MatrixRef nonlinearity(const MatrixRef& x, Nonlinearity kind);

  // -- linear algebra --------------------------------------------------------
  MatrixRef matmul(const MatrixRef& a, const MatrixRef& b);
  MatrixRef transpose(const MatrixRef& x);

  // -- rows ------------------------------------------------------------------
  /// Row-wise softmax, stabilized by row-max subtraction.
  MatrixRef softmax_rows(const MatrixRef& x);
  /// Row-wise layer normalization: gain and bias are 1 x cols.
  MatrixRef layernorm_rows(const MatrixRef& x, const MatrixRef& gain,
                           const MatrixRef& bias, double eps);
  /// Column mean over rows: 1 x cols.
  MatrixRef mean_rows(const MatrixRef& x);

  // -- shape -----------------------------------------------------------------
  MatrixRef slice_cols(const MatrixRef& x, int col_begin, int col_end);
  MatrixRef concat_cols(const std::vector<MatrixRef>& parts);

  // -- reductions / losses ---------------------------------------------------
  MatrixRef reduce_sum(const MatrixRef& x);  // 1x1
  /// Mean negative log-likelihood of labels under row-wise softmax(logits).
  /// Fused and stabilized; labels.size() must equal logits rows.
  MatrixRef softmax_cross_entropy(const MatrixRef& logits, const std::vector<int>& labels);

  /// Seeds d(loss)/d(loss) += 1 and replays backward rules in reverse order.
  /// loss must be 1x1.
  void backward(const MatrixRef& loss);

  /// Releases all recorded nodes. Parameter gradients are untouched.
  void clear() { nodes_.clear(); }
  size_t node_count() const { return nodes_.size(); }

 private:
  struct OpNode {
    MatrixRef output;
    std::function<void()> backprop;
  };
  std::vector<OpNode> nodes_;

  MatrixRef record(Matrix2D out, const char* op, bool requires);
};

/// Central-finite-difference verification of tape gradients.
struct GradCheckReport {
  double max_rel_error = 0.0;
  bool passed = false;
  int checked = 0;
  std::string worst_param;
  int worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Rebuilds the loss with `build` on a fresh tape for every probe. The
/// builder must be deterministic; a bitwise mismatch between two evaluations
/// is a hard error. Error metric: |analytic - numeric| / max(1, |analytic|,
/// |numeric|). eps must lie in [1e-7, 1e-4].
GradCheckReport grad_check(const std::function<MatrixRef(Tape&)>& build,
                           std::span<const NamedParam> params, double eps, double tol);

}  // namespace peftlab
