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
#include "peftlab/budget.hpp"

namespace peftlab {

namespace {

// Output width of a LoRA target weight.
long long lora_d_out(const ModelConfig& model_cfg, Site site) {
  return site == Site::ffn ? model_cfg.d_ff : model_cfg.d_model;
}

}  // namespace

long long param_count(const ModelConfig& model_cfg, const PeftConfig& peft_cfg) {
  peft_cfg.validate(model_cfg);
  const long long d = model_cfg.d_model;
  const long long r = peft_cfg.r;
  const long long layers = model_cfg.n_layers;
  long long per_layer = 0;
  if (peft_cfg.kind == PeftKind::adapter) {
    per_layer = static_cast<long long>(peft_cfg.placement.size()) * 2 * d * r;
  } else {
    for (Site site : peft_cfg.placement) {
      per_layer += d * r + r * lora_d_out(model_cfg, site);
    }
  }
  return per_layer * layers;
}

Budget flops_count(const ModelConfig& model_cfg, const PeftConfig& peft_cfg) {
  peft_cfg.validate(model_cfg);
  Budget budget;
  const long long d = model_cfg.d_model;
  const long long r = peft_cfg.r;
  const long long layers = model_cfg.n_layers;

  budget.trainable_params = param_count(model_cfg, peft_cfg);
  budget.head_params = static_cast<long long>(d) * model_cfg.n_classes;

  long long per_layer_flops = 0;
  long long per_layer_mix = 0;
  if (peft_cfg.kind == PeftKind::adapter) {
    per_layer_flops = static_cast<long long>(peft_cfg.placement.size()) * 2 * d * r;
    if (peft_cfg.initial_residual) {
      per_layer_mix = static_cast<long long>(peft_cfg.injection_sites.size()) *
                      budget.convention.adapter_mix_flops_per_dim * d;
    }
  } else {
    for (Site site : peft_cfg.placement) {
      const long long d_out = lora_d_out(model_cfg, site);
      per_layer_flops += d * r + r * d_out + d_out;  // two projections + s-scale
      if (peft_cfg.initial_residual) {
        per_layer_mix += budget.convention.lora_mix_flops_per_dim * d;
      }
    }
  }
  budget.peft_flops = per_layer_flops * layers;
  budget.injection_overhead_flops = per_layer_mix * layers;
  return budget;
}

}  // namespace peftlab
