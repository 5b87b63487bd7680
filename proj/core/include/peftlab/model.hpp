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
#include <filesystem>
#include <span>
#include <vector>

#include "peftlab/tape.hpp"

namespace peftlab {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 8;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 32;
  int max_seq_len = 16;
  int n_classes = 4;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  uint64_t seed = 1;
  bool train_head = true;
  // Pass the summed token+positional embedding through a layernorm before the
  // first layer. Off by default; the captured initial representation is the
  // raw sum.
  bool embed_layernorm = false;
  double layernorm_eps = 1e-5;

  /// Throws ConfigError listing every violated constraint.
  void validate() const;
};

struct LayerWeights {
  MatrixRef w_q, w_k, w_v, w_o;          // d x d
  MatrixRef w_ff1;                       // d x d_ff
  MatrixRef w_ff2;                       // d_ff x d
  MatrixRef ln1_gain, ln1_bias;          // 1 x d
  MatrixRef ln2_gain, ln2_bias;          // 1 x d
};

/// Pre-norm Transformer encoder with a frozen random base. Only the
/// classifier head may be trainable (config switch); everything else keeps
/// requires_grad=false for its whole life.
struct TransformerModel {
  ModelConfig config;
  MatrixRef token_embedding;       // vocab x d
  MatrixRef positional_embedding;  // max_seq_len x d
  MatrixRef embed_ln_gain, embed_ln_bias;  // 1 x d, used when embed_layernorm
  std::vector<LayerWeights> layers;
  MatrixRef head;                  // d x n_classes

  /// Every parameter except the head, with stable names.
  std::vector<NamedParam> base_parameters() const;
  /// base_parameters() plus the head.
  std::vector<NamedParam> named_parameters() const;
};

/// Deterministic: identical config (and seed) gives a bitwise-identical
/// model. All parameters drawn from N(0, 0.02^2) except layernorm gain/bias
/// which start at 1/0; everything but the head is frozen.
TransformerModel build_model(const ModelConfig& cfg);

/// Token + positional embedding rows; row i corresponds to tokens[i]. This is
/// the initial representation captured as h0 by forward().
Matrix2D embed(const TransformerModel& model, std::span<const int> tokens);

struct ForwardTrace {
  MatrixRef h0;                  // m x d, post-embedding
  std::vector<MatrixRef> hidden; // L+1 entries; hidden[0] == h0
  MatrixRef logits;              // m x n_classes, or 1 x n_classes when pooled
};

class AttachedPeft;  // peft.hpp

/// Runs the full encoder stack, applying the attached PEFT modules at their
/// configured placements. pooled=true mean-pools token states before the
/// head (sequence classification); otherwise the head applies per token.
ForwardTrace forward(const TransformerModel& model, std::span<const int> tokens,
                     Tape& tape, const AttachedPeft* peft = nullptr,
                     bool pooled = false);

/// Combined checksum over all base (non-head) parameters.
uint64_t base_checksum(const TransformerModel& model);

/// Checkpoint format: named double arrays with shape headers, little-endian
/// binary. PEFT weights are stored under a "peft/" name prefix.
void save_checkpoint(const TransformerModel& model, const AttachedPeft* peft,
                     const std::filesystem::path& path);
/// Loads into an already-built model/peft of matching shapes.
void load_checkpoint(TransformerModel& model, AttachedPeft* peft,
                     const std::filesystem::path& path);

}  // namespace peftlab
