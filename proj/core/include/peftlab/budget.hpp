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

#include "peftlab/peft.hpp"

namespace peftlab {

/// Per-token FLOP counting convention. Base module costs are unambiguous
/// (each multiply-accumulate of the two projections counts as one FLOP, plus
/// one op per output element for the LoRA s-scale). The mixing overhead
/// constants are calibrated, not derived: injection costs
/// adapter_mix_flops_per_dim * d per adapter site and
/// lora_mix_flops_per_dim * d per injected low-rank module.
struct FlopConvention {
  long long adapter_mix_flops_per_dim = 4;
  long long lora_mix_flops_per_dim = 1;
  const char* name = "mac-per-flop, calibrated mixing constants";
};

struct Budget {
  long long trainable_params = 0;         // PEFT weights only
  long long head_params = 0;              // reported separately
  long long peft_flops = 0;               // per-token forward cost of PEFT branches
  long long injection_overhead_flops = 0; // 0 when the initial residual is off
  FlopConvention convention;
};

/// Trainable PEFT parameter count, a pure function of the two configs.
/// Adapter: 2*d*r per module; LoRA: d*r + r*d_out per wrapped target.
long long param_count(const ModelConfig& model_cfg, const PeftConfig& peft_cfg);

/// Per-token forward FLOPs of the PEFT branches plus the injection overhead
/// under the documented convention. Pure function of the configs.
Budget flops_count(const ModelConfig& model_cfg, const PeftConfig& peft_cfg);

}  // namespace peftlab
