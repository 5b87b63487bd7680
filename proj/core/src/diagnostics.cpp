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
#include "peftlab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace peftlab {

namespace {

std::vector<double> row_norms(const Matrix2D& h) {
  std::vector<double> norms(h.rows());
  for (int i = 0; i < h.rows(); ++i) {
    double acc = 0.0;
    for (int j = 0; j < h.cols(); ++j) acc += h.at(i, j) * h.at(i, j);
    norms[i] = std::sqrt(acc);
    if (norms[i] == 0.0) {
      throw ComputeError("tokenwise similarity: zero-norm row " + std::to_string(i));
    }
  }
  return norms;
}

double row_dot(const Matrix2D& h, int i, int j) {
  double acc = 0.0;
  for (int c = 0; c < h.cols(); ++c) acc += h.at(i, c) * h.at(j, c);
  return acc;
}

// Deterministic "%.17g" formatting so artifacts are byte-identical on rerun.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double tokenwise_similarity(const Matrix2D& h) {
  const int m = h.rows();
  if (m < 2) throw InputError("tokenwise similarity: need at least 2 tokens");
  const auto norms = row_norms(h);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      if (i == j) continue;
      total += row_dot(h, i, j) / (norms[i] * norms[j]);
    }
  }
  return total / (static_cast<double>(m) * (m - 1));
}

Matrix2D similarity_matrix(const Matrix2D& h) {
  const int m = h.rows();
  if (m < 2) throw InputError("similarity matrix: need at least 2 tokens");
  const auto norms = row_norms(h);
  Matrix2D sim(m, m);
  for (int i = 0; i < m; ++i) {
    sim.at(i, i) = 1.0;
    for (int j = i + 1; j < m; ++j) {
      const double c = row_dot(h, i, j) / (norms[i] * norms[j]);
      sim.at(i, j) = c;
      sim.at(j, i) = c;
    }
  }
  return sim;
}

SimilarityReport layer_profile(const std::vector<ForwardTrace>& traces, RunMeta meta) {
  if (traces.empty()) throw InputError("layer_profile: empty batch");
  const size_t depth = traces.front().hidden.size();
  for (const auto& t : traces) {
    if (t.hidden.size() != depth) {
      throw InputError("layer_profile: traces disagree on layer count");
    }
  }

  SimilarityReport report;
  report.meta = std::move(meta);
  report.per_sentence.reserve(traces.size());
  for (const auto& t : traces) {
    std::vector<Matrix2D> mats;
    mats.reserve(depth);
    for (const auto& h : t.hidden) mats.push_back(similarity_matrix(*h));
    report.per_sentence.push_back(std::move(mats));
  }

  report.per_layer_mean.assign(depth, 0.0);
  for (size_t l = 0; l < depth; ++l) {
    double acc = 0.0;
    for (const auto& t : traces) acc += tokenwise_similarity(*t.hidden[l]);
    report.per_layer_mean[l] = acc / static_cast<double>(traces.size());
  }
  return report;
}

CompareTable last_layers_compare(const SimilarityReport& vanilla,
                                 const SimilarityReport& other, int k) {
  if (vanilla.per_layer_mean.size() != other.per_layer_mean.size()) {
    throw InputError("last_layers_compare: profiles have different depth (" +
                     std::to_string(vanilla.per_layer_mean.size()) + " vs " +
                     std::to_string(other.per_layer_mean.size()) + ")");
  }
  const int depth = static_cast<int>(vanilla.per_layer_mean.size());
  CompareTable table;
  if (k > depth) {
    table.clamped = true;
    k = depth;
  }
  if (k < 1) throw InputError("last_layers_compare: k must be >= 1");
  for (int l = depth - k; l < depth; ++l) {
    LayerDelta row;
    row.layer = l;
    row.vanilla = vanilla.per_layer_mean[l];
    row.other = other.per_layer_mean[l];
    row.delta = row.other - row.vanilla;
    row.lower = row.other < row.vanilla;
    table.rows.push_back(row);
  }
  return table;
}

void write_profile_csv(const SimilarityReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("write_profile_csv: cannot open " + path.string());
  os << "layer,mean_similarity\n";
  for (size_t l = 0; l < report.per_layer_mean.size(); ++l) {
    os << l << "," << fmt(report.per_layer_mean[l]) << "\n";
  }
  if (!os) throw IoError("write_profile_csv: write failed for " + path.string());
}

void write_matrix_csv(const Matrix2D& matrix, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("write_matrix_csv: cannot open " + path.string());
  os << "i,j,value\n";
  for (int i = 0; i < matrix.rows(); ++i) {
    for (int j = 0; j < matrix.cols(); ++j) {
      os << i << "," << j << "," << fmt(matrix.at(i, j)) << "\n";
    }
  }
  if (!os) throw IoError("write_matrix_csv: write failed for " + path.string());
}

Matrix2D read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("read_matrix_csv: cannot open " + path.string());
  std::string line;
  std::getline(is, line);  // header
  struct Cell { int i, j; double v; };
  std::vector<Cell> cells;
  int max_i = -1, max_j = -1;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    Cell c;
    char comma;
    if (!(ss >> c.i >> comma >> c.j >> comma >> c.v)) {
      throw IoError("read_matrix_csv: malformed line '" + line + "'");
    }
    max_i = std::max(max_i, c.i);
    max_j = std::max(max_j, c.j);
    cells.push_back(c);
  }
  Matrix2D m(max_i + 1, max_j + 1);
  for (const auto& c : cells) m.at(c.i, c.j) = c.v;
  return m;
}

namespace {

// Linear two-segment map over [-1, 1]: -1 -> blue, 0 -> white, +1 -> red.
void heat_color(double v, int& red, int& green, int& blue) {
  v = std::clamp(v, -1.0, 1.0);
  if (v >= 0.0) {
    red = 255;
    green = blue = static_cast<int>(std::lround(255.0 * (1.0 - v)));
  } else {
    blue = 255;
    red = green = static_cast<int>(std::lround(255.0 * (1.0 + v)));
  }
}

}  // namespace

void write_heatmap_svg(const Matrix2D& matrix, const std::filesystem::path& path) {
  const int cell = 24;
  const int w = matrix.cols() * cell, h = matrix.rows() * cell;
  std::ofstream os(path);
  if (!os) throw IoError("write_heatmap_svg: cannot open " + path.string());
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  for (int i = 0; i < matrix.rows(); ++i) {
    for (int j = 0; j < matrix.cols(); ++j) {
      const double v = matrix.at(i, j);
      if (!std::isfinite(v)) {
        throw NonFiniteError("write_heatmap_svg: non-finite cell at " +
                             std::to_string(i) + "," + std::to_string(j));
      }
      int r, g, b;
      heat_color(v, r, g, b);
      os << "<rect x=\"" << j * cell << "\" y=\"" << i * cell << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"rgb(" << r << "," << g << "," << b
         << ")\"><title>" << i << "," << j << ": " << fmt(v) << "</title></rect>\n";
    }
  }
  os << "</svg>\n";
  if (!os) throw IoError("write_heatmap_svg: write failed for " + path.string());
}

void heatmap_export(const Matrix2D& matrix, const std::filesystem::path& base) {
  auto csv = base;
  csv += ".csv";
  auto svg = base;
  svg += ".svg";
  write_matrix_csv(matrix, csv);
  write_heatmap_svg(matrix, svg);
}

void write_compare_csv(const CompareTable& table, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("write_compare_csv: cannot open " + path.string());
  os << "layer,vanilla,other,delta,lower\n";
  for (const auto& row : table.rows) {
    os << row.layer << "," << fmt(row.vanilla) << "," << fmt(row.other) << ","
       << fmt(row.delta) << "," << (row.lower ? 1 : 0) << "\n";
  }
  if (!os) throw IoError("write_compare_csv: write failed for " + path.string());
}

}  // namespace peftlab
