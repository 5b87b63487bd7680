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

#include <filesystem>
#include <string>
#include <vector>

#include "peftlab/model.hpp"

namespace peftlab {

/// Mean pairwise cosine similarity over distinct token rows of an m x d
/// hidden state: sum over ordered pairs i != j of cos(h_i, h_j) divided by
/// m(m-1). Requires m >= 2 and every row nonzero; padding tokens, if a caller
/// ever has them, must be stripped beforehand.
double tokenwise_similarity(const Matrix2D& h);

/// Full m x m cosine matrix. The diagonal is set to 1 by definition; the
/// off-diagonal entries are exactly symmetric.
Matrix2D similarity_matrix(const Matrix2D& h);

struct RunMeta {
  uint64_t seed = 0;
  double lambda = 0.0;
  std::string method;   // "adapter", "lora", "adapter+ir", ...
  std::string dataset;
};

struct SimilarityReport {
  std::vector<double> per_layer_mean;                // L+1 values
  std::vector<std::vector<Matrix2D>> per_sentence;   // [sentence][layer], m x m
  RunMeta meta;
};

/// Per-layer mean token-wise similarity averaged over sentences first, plus
/// the per-sentence similarity matrices.
SimilarityReport layer_profile(const std::vector<ForwardTrace>& traces,
                               RunMeta meta = {});

struct LayerDelta {
  int layer = 0;
  double vanilla = 0.0;
  double other = 0.0;
  double delta = 0.0;   // other - vanilla
  bool lower = false;   // other < vanilla
};

struct CompareTable {
  std::vector<LayerDelta> rows;  // last k layers, shallow to deep
  bool clamped = false;          // k exceeded the profile and was clamped
};

/// Per-layer deltas over the last k layers of two profiles with matching
/// depth. k larger than the profile clamps to the full profile.
CompareTable last_layers_compare(const SimilarityReport& vanilla,
                                 const SimilarityReport& other, int k);

// -- file emission ----------------------------------------------------------
// CSV is the source of truth; SVG is a static linear color map over [-1, 1].

void write_profile_csv(const SimilarityReport& report, const std::filesystem::path& path);
void write_matrix_csv(const Matrix2D& matrix, const std::filesystem::path& path);
Matrix2D read_matrix_csv(const std::filesystem::path& path);
void write_heatmap_svg(const Matrix2D& matrix, const std::filesystem::path& path);
/// Writes <base>.csv and <base>.svg for a symmetric similarity matrix.
void heatmap_export(const Matrix2D& matrix, const std::filesystem::path& base);
void write_compare_csv(const CompareTable& table, const std::filesystem::path& path);

}  // namespace peftlab
