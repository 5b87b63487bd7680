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

#include <optional>
#include <set>
#include <string>

#include "peftlab/model.hpp"

namespace peftlab {

enum class PeftKind { adapter, lora };

/// Placement / injection sites. Adapters sit after the attention and
/// feed-forward sublayers; LoRA wraps the q/k/v projections and the first
/// feed-forward matrix. all_low_rank is the LoRA injection selector.
enum class Site { att, ffn, q, k, v, all_low_rank };

const char* to_string(PeftKind kind);
PeftKind peft_kind_from_string(const std::string& s);
const char* to_string(Site site);
Site site_from_string(const std::string& s);

struct PeftConfig {
  PeftKind kind = PeftKind::lora;
  int r = 8;                     // bottleneck / rank
  double lambda = 0.0;           // initial-residual mixing weight, [0, 1)
  double scale = 2.0;            // LoRA output scale s >= 1
  bool initial_residual = false; // inject h0 at the configured sites
  std::set<Site> placement;      // adapter: subset of {att, ffn}; lora: {q, k, v, ffn}
  std::set<Site> injection_sites;// adapter: subset of placement; lora: {all_low_rank}
  Nonlinearity nonlinearity = Nonlinearity::relu;  // adapter f(.)
  // Ablation: route the mixed input through the frozen weight as well, not
  // just the low-rank branch (LoRA only).
  bool lora_mix_frozen_path = false;

  /// Defaults mirroring common usage: adapters at both sublayers, injection
  /// after attention, lambda 0.2.
  static PeftConfig adapter_defaults();
  /// LoRA on q/k/v + feed-forward, injection into every low-rank module,
  /// lambda 0.6.
  static PeftConfig lora_defaults();

  /// Throws ConfigError listing every violated constraint.
  void validate(const ModelConfig& model_cfg) const;
};

struct AdapterModule {
  MatrixRef w_down;  // d x r, trainable, gaussian init
  MatrixRef w_up;    // r x d, trainable, zero init
};

struct LoraModule {
  MatrixRef w_down;  // d x r, trainable, gaussian init
  MatrixRef w_up;    // r x d_out, trainable, zero init => delta-W starts at 0
  MatrixRef frozen;  // the wrapped base weight, d x d_out, never mutated here
};

// ---------------------------------------------------------------------------
// Forward rules. All of them record on the tape.
// ---------------------------------------------------------------------------

/// (1-lambda)*h + lambda*h0. Gradient reaches h scaled by (1-lambda) and the
/// producers of h0 scaled by lambda.
MatrixRef mix_with_initial(Tape& t, const MatrixRef& h, const MatrixRef& h0,
                           double lambda);

/// h + f(h W_down) W_up
MatrixRef adapter_apply(Tape& t, const AdapterModule& mod, const MatrixRef& h,
                        Nonlinearity f);

/// ht + f(ht W_down) W_up with ht = mix_with_initial(h, h0, lambda); the
/// residual branch carries ht, not h.
MatrixRef adapter_apply(Tape& t, const AdapterModule& mod, const MatrixRef& h,
                        const MatrixRef& h0, double lambda, Nonlinearity f);

/// h W + s * (h W_down) W_up, without materializing W + s*dW.
MatrixRef lora_apply(Tape& t, const LoraModule& mod, const MatrixRef& h, double s);

/// h W + s * (ht W_down) W_up with ht = mix_with_initial(h, h0, lambda). The
/// frozen path receives the unmixed h unless mix_frozen_path is set.
MatrixRef lora_apply(Tape& t, const LoraModule& mod, const MatrixRef& h,
                     const MatrixRef& h0, double lambda, double s,
                     bool mix_frozen_path = false);

// ---------------------------------------------------------------------------
// Attachment
// ---------------------------------------------------------------------------

struct LayerPeft {
  std::optional<AdapterModule> adapter_att, adapter_ffn;
  std::optional<LoraModule> lora_q, lora_k, lora_v, lora_ffn;
};

class AttachedPeft {
 public:
  AttachedPeft(PeftConfig cfg, std::vector<LayerPeft> layers,
               std::vector<NamedParam> trainable)
      : cfg_(std::move(cfg)), layers_(std::move(layers)), trainable_(std::move(trainable)) {}

  const PeftConfig& config() const { return cfg_; }
  const LayerPeft& layer(int l) const { return layers_.at(l); }
  int n_layers() const { return static_cast<int>(layers_.size()); }

  /// The trainable parameters introduced by this attachment (PEFT weights
  /// only; the classifier head is enumerated by the model).
  std::span<const NamedParam> trainable() const { return trainable_; }
  long long trainable_count() const;

  bool injects_at(Site site) const;

 private:
  PeftConfig cfg_;
  std::vector<LayerPeft> layers_;
  std::vector<NamedParam> trainable_;
};

/// Instantiates one module per (layer, placement site), freezes every base
/// parameter, and sets the head trainable per the model config. Identical
/// seed gives bitwise-identical modules; the injection flag adds no
/// parameters and draws nothing from the RNG.
AttachedPeft attach(TransformerModel& model, const PeftConfig& cfg, uint64_t seed);

}  // namespace peftlab
