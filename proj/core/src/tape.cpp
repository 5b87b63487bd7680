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
#include "peftlab/tape.hpp"

#include <cmath>
#include <numbers>

namespace peftlab {

const char* to_string(Nonlinearity kind) {
  switch (kind) {
    case Nonlinearity::relu: return "relu";
    case Nonlinearity::gelu: return "gelu";
  }
  return "?";
}

Nonlinearity nonlinearity_from_string(const std::string& s) {
  if (s == "relu") return Nonlinearity::relu;
  if (s == "gelu") return Nonlinearity::gelu;
  throw ConfigError("unknown nonlinearity '" + s + "' (expected relu|gelu)");
}

// Constants of the tanh approximation.
namespace {
constexpr double kGeluCubic = 0.044715;
const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu_scalar(double x) {
  const double u = kGeluScale * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
  const double u = kGeluScale * (x + kGeluCubic * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

namespace {

void require_same_shape(const char* op, const Matrix2D& a, const Matrix2D& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

}  // namespace

MatrixRef Tape::record(Matrix2D out, const char* op, bool requires) {
  out.check_finite(op);
  auto ref = make_matrix(std::move(out));
  ref->set_requires_grad(requires);
  if (requires) {
    // The backward closure is bound by the caller once the output ref exists.
    nodes_.push_back(OpNode{ref, nullptr});
  }
  return ref;
}

MatrixRef Tape::add(const MatrixRef& a, const MatrixRef& b) {
  require_same_shape("add", *a, *b);
  Matrix2D out(a->rows(), a->cols());
  for (size_t i = 0; i < out.values().size(); ++i) {
    out.values()[i] = a->values()[i] + b->values()[i];
  }
  const bool req = a->requires_grad() || b->requires_grad();
  auto ref = record(std::move(out), "add", req);
  if (req) {
    nodes_.back().backprop = [a, b, out = nodes_.back().output]() {
      const auto& g = out->grad();
      if (a->requires_grad()) {
        auto& ga = a->grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b->requires_grad()) {
        auto& gb = b->grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  }
  return ref;
}

MatrixRef Tape::affine_mix(const MatrixRef& x, const MatrixRef& y, double alpha,
                           double beta) {
  require_same_shape("affine_mix", *x, *y);
  if (!std::isfinite(alpha) || !std::isfinite(beta)) {
    throw NonFiniteError("affine_mix: non-finite coefficient");
  }
  Matrix2D out(x->rows(), x->cols());
  for (size_t i = 0; i < out.values().size(); ++i) {
    out.values()[i] = alpha * x->values()[i] + beta * y->values()[i];
  }
  const bool req = x->requires_grad() || y->requires_grad();
  auto ref = record(std::move(out), "affine_mix", req);
  if (req) {
    nodes_.back().backprop = [x, y, alpha, beta, out = nodes_.back().output]() {
      const auto& g = out->grad();
      if (x->requires_grad()) {
        auto& gx = x->grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += alpha * g[i];
      }
      if (y->requires_grad()) {
        auto& gy = y->grad();
        for (size_t i = 0; i < g.size(); ++i) gy[i] += beta * g[i];
      }
    };
  }
  return ref;
}

MatrixRef Tape::scale(const MatrixRef& x, double c) {
  if (!std::isfinite(c)) throw NonFiniteError("scale: non-finite coefficient");
  Matrix2D out(x->rows(), x->cols());
  for (size_t i = 0; i < out.values().size(); ++i) out.values()[i] = c * x->values()[i];
  const bool req = x->requires_grad();
  auto ref = record(std::move(out), "scale", req);
  if (req) {
    nodes_.back().backprop = [x, c, out = nodes_.back().output]() {
      const auto& g = out->grad();
      auto& gx = x->grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    };
  }
  return ref;
}

MatrixRef Tape::nonlinearity(const MatrixRef& x, Nonlinearity kind) {
  Matrix2D out(x->rows(), x->cols());
  if (kind == Nonlinearity::relu) {
    for (size_t i = 0; i < out.values().size(); ++i) {
      const double v = x->values()[i];
      out.values()[i] = v > 0.0 ? v : 0.0;
    }
  } else {
    for (size_t i = 0; i < out.values().size(); ++i) {
      out.values()[i] = gelu_scalar(x->values()[i]);
    }
  }
  const bool req = x->requires_grad();
  auto ref = record(std::move(out), "nonlinearity", req);
  if (req) {
    nodes_.back().backprop = [x, kind, out = nodes_.back().output]() {
      const auto& g = out->grad();
      auto& gx = x->grad();
      if (kind == Nonlinearity::relu) {
        for (size_t i = 0; i < g.size(); ++i) {
          if (x->values()[i] > 0.0) gx[i] += g[i];
        }
      } else {
        for (size_t i = 0; i < g.size(); ++i) {
          gx[i] += gelu_grad_scalar(x->values()[i]) * g[i];
        }
      }
    };
  }
  return ref;
}

MatrixRef Tape::matmul(const MatrixRef& a, const MatrixRef& b) {
  if (a->cols() != b->rows()) {
    throw ShapeError("matmul: inner dimensions disagree, a is " + a->shape_str() +
                     ", b is " + b->shape_str());
  }
  const int m = a->rows(), k = a->cols(), n = b->cols();
  Matrix2D out(m, n);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = a->at(i, p);
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) out.at(i, j) += av * b->at(p, j);
    }
  }
  const bool req = a->requires_grad() || b->requires_grad();
  auto ref = record(std::move(out), "matmul", req);
  if (req) {
    nodes_.back().backprop = [a, b, m, k, n, out = nodes_.back().output]() {
      const auto& g = *out;
      if (a->requires_grad()) {
        auto& ga = a->grad();
        // dA = dC * B^T
        for (int i = 0; i < m; ++i) {
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += g.grad()[static_cast<size_t>(i) * n + j] * b->at(p, j);
            ga[static_cast<size_t>(i) * k + p] += acc;
          }
        }
      }
      if (b->requires_grad()) {
        auto& gb = b->grad();
        // dB = A^T * dC
        for (int p = 0; p < k; ++p) {
          for (int i = 0; i < m; ++i) {
            const double av = a->at(i, p);
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) {
              gb[static_cast<size_t>(p) * n + j] += av * g.grad()[static_cast<size_t>(i) * n + j];
            }
          }
        }
      }
    };
  }
  return ref;
}

MatrixRef Tape::transpose(const MatrixRef& x) {
  Matrix2D out(x->cols(), x->rows());
  for (int i = 0; i < x->rows(); ++i) {
    for (int j = 0; j < x->cols(); ++j) out.at(j, i) = x->at(i, j);
  }
  const bool req = x->requires_grad();
  auto ref = record(std::move(out), "transpose", req);
  if (req) {
    nodes_.back().backprop = [x, out = nodes_.back().output]() {
      auto& gx = x->grad();
      const int r = x->rows(), c = x->cols();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          gx[static_cast<size_t>(i) * c + j] += out->grad()[static_cast<size_t>(j) * r + i];
        }
      }
    };
  }
  return ref;
}

MatrixRef Tape::softmax_rows(const MatrixRef& x) {
  const int m = x->rows(), n = x->cols();
  if (n < 1) throw ShapeError("softmax_rows: empty rows in " + x->shape_str());
  Matrix2D out(m, n);
  for (int i = 0; i < m; ++i) {
    double rowmax = x->at(i, 0);
    for (int j = 1; j < n; ++j) rowmax = std::max(rowmax, x->at(i, j));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(x->at(i, j) - rowmax);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= sum;
  }
  const bool req = x->requires_grad();
  auto ref = record(std::move(out), "softmax_rows", req);
  if (req) {
    nodes_.back().backprop = [x, m, n, out = nodes_.back().output]() {
      auto& gx = x->grad();
      for (int i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j) {
          dot += out->grad()[static_cast<size_t>(i) * n + j] * out->at(i, j);
        }
        for (int j = 0; j < n; ++j) {
          gx[static_cast<size_t>(i) * n + j] +=
              out->at(i, j) * (out->grad()[static_cast<size_t>(i) * n + j] - dot);
        }
      }
    };
  }
  return ref;
}

MatrixRef Tape::layernorm_rows(const MatrixRef& x, const MatrixRef& gain,
                               const MatrixRef& bias, double eps) {
  const int m = x->rows(), n = x->cols();
  if (gain->rows() != 1 || gain->cols() != n || bias->rows() != 1 || bias->cols() != n) {
    throw ShapeError("layernorm_rows: gain/bias must be 1x" + std::to_string(n) +
                     ", got " + gain->shape_str() + " and " + bias->shape_str());
  }
  if (!(eps > 0.0)) throw InputError("layernorm_rows: eps must be > 0");

  // Cache per-row mean and inverse stddev for the backward rule.
  auto mean = std::make_shared<std::vector<double>>(m);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  Matrix2D out(m, n);
  for (int i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x->at(i, j);
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = x->at(i, j) - mu;
      var += d * d;
    }
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*mean)[i] = mu;
    (*inv_std)[i] = is;
    for (int j = 0; j < n; ++j) {
      out.at(i, j) = (x->at(i, j) - mu) * is * gain->at(0, j) + bias->at(0, j);
    }
  }
  const bool req = x->requires_grad() || gain->requires_grad() || bias->requires_grad();
  auto ref = record(std::move(out), "layernorm_rows", req);
  if (req) {
    nodes_.back().backprop = [x, gain, bias, mean, inv_std, m, n,
                              out = nodes_.back().output]() {
      for (int i = 0; i < m; ++i) {
        const double mu = (*mean)[i];
        const double is = (*inv_std)[i];
        // dxhat_j = dy_j * gain_j ; xhat_j = (x_j - mu) * is
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < n; ++j) {
          const double xhat = (x->at(i, j) - mu) * is;
          const double dy = out->grad()[static_cast<size_t>(i) * n + j];
          const double dxhat = dy * gain->at(0, j);
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (gain->requires_grad()) gain->grad()[j] += dy * xhat;
          if (bias->requires_grad()) bias->grad()[j] += dy;
        }
        if (x->requires_grad()) {
          auto& gx = x->grad();
          for (int j = 0; j < n; ++j) {
            const double xhat = (x->at(i, j) - mu) * is;
            const double dy = out->grad()[static_cast<size_t>(i) * n + j];
            const double dxhat = dy * gain->at(0, j);
            gx[static_cast<size_t>(i) * n + j] +=
                is * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / n);
          }
        }
      }
    };
  }
  return ref;
}

MatrixRef Tape::mean_rows(const MatrixRef& x) {
  const int m = x->rows(), n = x->cols();
  if (m < 1) throw ShapeError("mean_rows: no rows in " + x->shape_str());
  Matrix2D out(1, n);
  for (int j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int i = 0; i < m; ++i) acc += x->at(i, j);
    out.at(0, j) = acc / m;
  }
  const bool req = x->requires_grad();
  auto ref = record(std::move(out), "mean_rows", req);
  if (req) {
    nodes_.back().backprop = [x, m, n, out = nodes_.back().output]() {
      auto& gx = x->grad();
      for (int j = 0; j < n; ++j) {
        const double g = out->grad()[j] / m;
        for (int i = 0; i < m; ++i) gx[static_cast<size_t>(i) * n + j] += g;
      }
    };
  }
  return ref;
}

MatrixRef Tape::slice_cols(const MatrixRef& x, int col_begin, int col_end) {
  if (col_begin < 0 || col_end > x->cols() || col_begin >= col_end) {
    throw ShapeError("slice_cols: [" + std::to_string(col_begin) + "," +
                     std::to_string(col_end) + ") out of range for " + x->shape_str());
  }
  const int m = x->rows(), w = col_end - col_begin;
  Matrix2D out(m, w);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < w; ++j) out.at(i, j) = x->at(i, col_begin + j);
  }
  const bool req = x->requires_grad();
  auto ref = record(std::move(out), "slice_cols", req);
  if (req) {
    nodes_.back().backprop = [x, col_begin, m, w, out = nodes_.back().output]() {
      auto& gx = x->grad();
      const int n = x->cols();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < w; ++j) {
          gx[static_cast<size_t>(i) * n + col_begin + j] +=
              out->grad()[static_cast<size_t>(i) * w + j];
        }
      }
    };
  }
  return ref;
}

MatrixRef Tape::concat_cols(const std::vector<MatrixRef>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const int m = parts.front()->rows();
  int total = 0;
  bool req = false;
  for (const auto& p : parts) {
    if (p->rows() != m) {
      throw ShapeError("concat_cols: row mismatch " + parts.front()->shape_str() +
                       " vs " + p->shape_str());
    }
    total += p->cols();
    req = req || p->requires_grad();
  }
  Matrix2D out(m, total);
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < p->cols(); ++j) out.at(i, off + j) = p->at(i, j);
    }
    off += p->cols();
  }
  auto ref = record(std::move(out), "concat_cols", req);
  if (req) {
    nodes_.back().backprop = [parts, m, total, out = nodes_.back().output]() {
      int off = 0;
      for (const auto& p : parts) {
        if (p->requires_grad()) {
          auto& gp = p->grad();
          for (int i = 0; i < m; ++i) {
            for (int j = 0; j < p->cols(); ++j) {
              gp[static_cast<size_t>(i) * p->cols() + j] +=
                  out->grad()[static_cast<size_t>(i) * total + off + j];
            }
          }
        }
        off += p->cols();
      }
    };
  }
  return ref;
}

MatrixRef Tape::reduce_sum(const MatrixRef& x) {
  Matrix2D out(1, 1);
  double acc = 0.0;
  for (double v : x->values()) acc += v;
  out.at(0, 0) = acc;
  const bool req = x->requires_grad();
  auto ref = record(std::move(out), "reduce_sum", req);
  if (req) {
    nodes_.back().backprop = [x, out = nodes_.back().output]() {
      const double g = out->grad()[0];
      auto& gx = x->grad();
      for (auto& v : gx) v += g;
    };
  }
  return ref;
}

MatrixRef Tape::softmax_cross_entropy(const MatrixRef& logits,
                                      const std::vector<int>& labels) {
  const int m = logits->rows(), n = logits->cols();
  if (static_cast<int>(labels.size()) != m) {
    throw InputError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(m) + " rows");
  }
  auto probs = std::make_shared<Matrix2D>(m, n);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    if (labels[i] < 0 || labels[i] >= n) {
      throw InputError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range at row " + std::to_string(i));
    }
    double rowmax = logits->at(i, 0);
    for (int j = 1; j < n; ++j) rowmax = std::max(rowmax, logits->at(i, j));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(logits->at(i, j) - rowmax);
      probs->at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < n; ++j) probs->at(i, j) /= sum;
    total += (rowmax + std::log(sum)) - logits->at(i, labels[i]);
  }
  Matrix2D out(1, 1);
  out.at(0, 0) = total / m;
  const bool req = logits->requires_grad();
  auto ref = record(std::move(out), "softmax_cross_entropy", req);
  if (req) {
    nodes_.back().backprop = [logits, labels, probs, m, n, out = nodes_.back().output]() {
      const double g = out->grad()[0] / m;
      auto& gl = logits->grad();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          const double onehot = (j == labels[i]) ? 1.0 : 0.0;
          gl[static_cast<size_t>(i) * n + j] += g * (probs->at(i, j) - onehot);
        }
      }
    };
  }
  return ref;
}

void Tape::backward(const MatrixRef& loss) {
  if (loss->size() != 1) {
    throw InputError("backward: loss must be 1x1, got " + loss->shape_str());
  }
  loss->grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->has_grad()) it->backprop();
  }
}

GradCheckReport grad_check(const std::function<MatrixRef(Tape&)>& build,
                           std::span<const NamedParam> params, double eps, double tol) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw InputError("grad_check: eps must lie in [1e-7, 1e-4]");
  }
  auto eval = [&]() {
    Tape t;
    return build(t)->at(0, 0);
  };
  const double l0 = eval();
  const double l1 = eval();
  if (l0 != l1) {
    throw Error("grad_check: loss builder is not deterministic (" +
                std::to_string(l0) + " vs " + std::to_string(l1) + ")");
  }

  for (const auto& p : params) p.value->zero_grad();
  {
    Tape t;
    auto loss = build(t);
    t.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    analytic.push_back(p.value->has_grad() ? p.value->grad()
                                           : std::vector<double>(p.value->size(), 0.0));
  }

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& mat = *params[pi].value;
    for (int i = 0; i < mat.size(); ++i) {
      const double saved = mat.values()[i];
      mat.values()[i] = saved + eps;
      const double lp = eval();
      mat.values()[i] = saved - eps;
      const double lm = eval();
      mat.values()[i] = saved;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel =
          std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = params[pi].name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace peftlab
