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
#include "peftlab/peft.hpp"

#include <cmath>

namespace peftlab {

const char* to_string(PeftKind kind) {
  return kind == PeftKind::adapter ? "adapter" : "lora";
}

PeftKind peft_kind_from_string(const std::string& s) {
  if (s == "adapter") return PeftKind::adapter;
  if (s == "lora") return PeftKind::lora;
  throw ConfigError("unknown peft kind '" + s + "' (expected adapter|lora)");
}

const char* to_string(Site site) {
  switch (site) {
    case Site::att: return "att";
    case Site::ffn: return "ffn";
    case Site::q: return "q";
    case Site::k: return "k";
    case Site::v: return "v";
    case Site::all_low_rank: return "all_low_rank";
  }
  return "?";
}

Site site_from_string(const std::string& s) {
  if (s == "att") return Site::att;
  if (s == "ffn") return Site::ffn;
  if (s == "q") return Site::q;
  if (s == "k") return Site::k;
  if (s == "v") return Site::v;
  if (s == "all_low_rank" || s == "all") return Site::all_low_rank;
  throw ConfigError("unknown site '" + s + "'");
}

PeftConfig PeftConfig::adapter_defaults() {
  PeftConfig cfg;
  cfg.kind = PeftKind::adapter;
  cfg.r = 8;
  cfg.lambda = 0.2;
  cfg.placement = {Site::att, Site::ffn};
  cfg.injection_sites = {Site::att};
  return cfg;
}

PeftConfig PeftConfig::lora_defaults() {
  PeftConfig cfg;
  cfg.kind = PeftKind::lora;
  cfg.r = 8;
  cfg.lambda = 0.6;
  cfg.scale = 2.0;
  cfg.placement = {Site::q, Site::k, Site::v, Site::ffn};
  cfg.injection_sites = {Site::all_low_rank};
  return cfg;
}

void PeftConfig::validate(const ModelConfig& model_cfg) const {
  std::string problems;
  auto fail = [&](const std::string& p) {
    if (!problems.empty()) problems += "; ";
    problems += p;
  };
  if (r < 1) fail("r must be >= 1");
  if (r > model_cfg.d_model) {
    fail("r (" + std::to_string(r) + ") must not exceed d_model (" +
         std::to_string(model_cfg.d_model) + ")");
  }
  if (!(lambda >= 0.0 && lambda < 1.0)) fail("lambda must lie in [0, 1)");
  if (!(scale >= 1.0)) fail("scale must be >= 1");
  if (placement.empty()) fail("placement must be nonempty");

  const std::set<Site> adapter_sites = {Site::att, Site::ffn};
  const std::set<Site> lora_sites = {Site::q, Site::k, Site::v, Site::ffn};
  if (kind == PeftKind::adapter) {
    for (Site s : placement) {
      if (!adapter_sites.count(s)) {
        fail(std::string("adapter placement cannot include '") + to_string(s) + "'");
      }
    }
    for (Site s : injection_sites) {
      if (!placement.count(s)) {
        fail(std::string("injection site '") + to_string(s) + "' is not a placement site");
      }
    }
    if (initial_residual && injection_sites.empty()) {
      fail("initial_residual requires at least one injection site");
    }
    if (lora_mix_frozen_path) fail("lora_mix_frozen_path applies to lora only");
  } else {
    for (Site s : placement) {
      if (!lora_sites.count(s)) {
        fail(std::string("lora placement cannot include '") + to_string(s) + "'");
      }
    }
    if (initial_residual &&
        injection_sites != std::set<Site>{Site::all_low_rank}) {
      fail("lora injection sites must be {all_low_rank}");
    }
  }
  if (!problems.empty()) throw ConfigError("invalid peft config: " + problems);
}

MatrixRef mix_with_initial(Tape& t, const MatrixRef& h, const MatrixRef& h0,
                           double lambda) {
  if (!h->same_shape(*h0)) {
    throw ShapeError("mix_with_initial: shapes " + h->shape_str() + " vs " +
                     h0->shape_str());
  }
  if (!(lambda >= 0.0 && lambda < 1.0)) {
    throw InputError("mix_with_initial: lambda must lie in [0, 1)");
  }
  return t.affine_mix(h, h0, 1.0 - lambda, lambda);
}

MatrixRef adapter_apply(Tape& t, const AdapterModule& mod, const MatrixRef& h,
                        Nonlinearity f) {
  auto bottleneck = t.nonlinearity(t.matmul(h, mod.w_down), f);
  return t.add(h, t.matmul(bottleneck, mod.w_up));
}

MatrixRef adapter_apply(Tape& t, const AdapterModule& mod, const MatrixRef& h,
                        const MatrixRef& h0, double lambda, Nonlinearity f) {
  auto mixed = mix_with_initial(t, h, h0, lambda);
  auto bottleneck = t.nonlinearity(t.matmul(mixed, mod.w_down), f);
  return t.add(mixed, t.matmul(bottleneck, mod.w_up));
}

MatrixRef lora_apply(Tape& t, const LoraModule& mod, const MatrixRef& h, double s) {
  auto base = t.matmul(h, mod.frozen);
  auto low_rank = t.matmul(t.matmul(h, mod.w_down), mod.w_up);
  return t.add(base, t.scale(low_rank, s));
}

MatrixRef lora_apply(Tape& t, const LoraModule& mod, const MatrixRef& h,
                     const MatrixRef& h0, double lambda, double s,
                     bool mix_frozen_path) {
  auto mixed = mix_with_initial(t, h, h0, lambda);
  auto base = t.matmul(mix_frozen_path ? mixed : h, mod.frozen);
  auto low_rank = t.matmul(t.matmul(mixed, mod.w_down), mod.w_up);
  return t.add(base, t.scale(low_rank, s));
}

long long AttachedPeft::trainable_count() const {
  long long total = 0;
  for (const auto& p : trainable_) total += p.value->size();
  return total;
}

bool AttachedPeft::injects_at(Site site) const {
  return cfg_.initial_residual && cfg_.injection_sites.count(site) > 0;
}

AttachedPeft attach(TransformerModel& model, const PeftConfig& cfg, uint64_t seed) {
  cfg.validate(model.config);
  std::mt19937_64 rng(seed);
  const int d = model.config.d_model;
  constexpr double kInitStd = 0.02;

  std::vector<LayerPeft> layers(model.config.n_layers);
  std::vector<NamedParam> trainable;

  auto trainable_gaussian = [&](int rows, int cols) {
    auto ref = make_matrix(Matrix2D::gaussian(rows, cols, kInitStd, rng));
    ref->set_requires_grad(true);
    return ref;
  };
  auto trainable_zeros = [&](int rows, int cols) {
    auto ref = make_matrix(Matrix2D::zeros(rows, cols));
    ref->set_requires_grad(true);
    return ref;
  };

  // Sites instantiate in a fixed order so a given seed always produces the
  // same weights regardless of std::set iteration concerns.
  for (int l = 0; l < model.config.n_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    auto add_adapter = [&](Site site, std::optional<AdapterModule>& slot) {
      if (!cfg.placement.count(site)) return;
      AdapterModule mod{trainable_gaussian(d, cfg.r), trainable_zeros(cfg.r, d)};
      trainable.push_back({prefix + to_string(site) + ".w_down", mod.w_down});
      trainable.push_back({prefix + to_string(site) + ".w_up", mod.w_up});
      slot = std::move(mod);
    };
    auto add_lora = [&](Site site, const MatrixRef& target,
                        std::optional<LoraModule>& slot) {
      if (!cfg.placement.count(site)) return;
      const int d_out = target->cols();
      LoraModule mod{trainable_gaussian(d, cfg.r), trainable_zeros(cfg.r, d_out), target};
      trainable.push_back({prefix + to_string(site) + ".w_down", mod.w_down});
      trainable.push_back({prefix + to_string(site) + ".w_up", mod.w_up});
      slot = std::move(mod);
    };

    auto& lw = model.layers[l];
    auto& lp = layers[l];
    if (cfg.kind == PeftKind::adapter) {
      add_adapter(Site::att, lp.adapter_att);
      add_adapter(Site::ffn, lp.adapter_ffn);
    } else {
      add_lora(Site::q, lw.w_q, lp.lora_q);
      add_lora(Site::k, lw.w_k, lp.lora_k);
      add_lora(Site::v, lw.w_v, lp.lora_v);
      add_lora(Site::ffn, lw.w_ff1, lp.lora_ffn);
    }
  }

  for (auto& p : model.base_parameters()) p.value->set_requires_grad(false);
  model.head->set_requires_grad(model.config.train_head);

  return AttachedPeft(cfg, std::move(layers), std::move(trainable));
}

}  // namespace peftlab
