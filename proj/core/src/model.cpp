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
#include "peftlab/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "peftlab/peft.hpp"

namespace peftlab {

namespace {
constexpr double kInitStd = 0.02;
}

void ModelConfig::validate() const {
  std::string problems;
  auto fail = [&](const std::string& p) {
    if (!problems.empty()) problems += "; ";
    problems += p;
  };
  if (d_model < 1) fail("d_model must be >= 1");
  if (n_layers < 0) fail("n_layers must be >= 0");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (d_model >= 1 && n_heads >= 1 && d_model % n_heads != 0) {
    fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
         std::to_string(n_heads) + ")");
  }
  if (d_ff < 1) fail("d_ff must be >= 1");
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (max_seq_len < 1) fail("max_seq_len must be >= 1");
  if (n_classes < 1) fail("n_classes must be >= 1");
  if (!(layernorm_eps > 0.0)) fail("layernorm_eps must be > 0");
  if (!problems.empty()) throw ConfigError("invalid model config: " + problems);
}

TransformerModel build_model(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const int d = cfg.d_model;

  auto frozen = [&](Matrix2D m) {
    auto ref = make_matrix(std::move(m));
    ref->set_requires_grad(false);
    return ref;
  };

  TransformerModel model;
  model.config = cfg;
  model.token_embedding = frozen(Matrix2D::gaussian(cfg.vocab_size, d, kInitStd, rng));
  model.positional_embedding =
      frozen(Matrix2D::gaussian(cfg.max_seq_len, d, kInitStd, rng));
  model.embed_ln_gain = frozen(Matrix2D::constant(1, d, 1.0));
  model.embed_ln_bias = frozen(Matrix2D::zeros(1, d));

  model.layers.reserve(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerWeights w;
    w.w_q = frozen(Matrix2D::gaussian(d, d, kInitStd, rng));
    w.w_k = frozen(Matrix2D::gaussian(d, d, kInitStd, rng));
    w.w_v = frozen(Matrix2D::gaussian(d, d, kInitStd, rng));
    w.w_o = frozen(Matrix2D::gaussian(d, d, kInitStd, rng));
    w.w_ff1 = frozen(Matrix2D::gaussian(d, cfg.d_ff, kInitStd, rng));
    w.w_ff2 = frozen(Matrix2D::gaussian(cfg.d_ff, d, kInitStd, rng));
    w.ln1_gain = frozen(Matrix2D::constant(1, d, 1.0));
    w.ln1_bias = frozen(Matrix2D::zeros(1, d));
    w.ln2_gain = frozen(Matrix2D::constant(1, d, 1.0));
    w.ln2_bias = frozen(Matrix2D::zeros(1, d));
    model.layers.push_back(std::move(w));
  }

  model.head = frozen(Matrix2D::gaussian(d, cfg.n_classes, kInitStd, rng));
  model.head->set_requires_grad(cfg.train_head);
  return model;
}

std::vector<NamedParam> TransformerModel::base_parameters() const {
  std::vector<NamedParam> out;
  out.push_back({"token_embedding", token_embedding});
  out.push_back({"positional_embedding", positional_embedding});
  out.push_back({"embed_ln_gain", embed_ln_gain});
  out.push_back({"embed_ln_bias", embed_ln_bias});
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const auto& w = layers[l];
    out.push_back({p + "w_q", w.w_q});
    out.push_back({p + "w_k", w.w_k});
    out.push_back({p + "w_v", w.w_v});
    out.push_back({p + "w_o", w.w_o});
    out.push_back({p + "w_ff1", w.w_ff1});
    out.push_back({p + "w_ff2", w.w_ff2});
    out.push_back({p + "ln1_gain", w.ln1_gain});
    out.push_back({p + "ln1_bias", w.ln1_bias});
    out.push_back({p + "ln2_gain", w.ln2_gain});
    out.push_back({p + "ln2_bias", w.ln2_bias});
  }
  return out;
}

std::vector<NamedParam> TransformerModel::named_parameters() const {
  auto out = base_parameters();
  out.push_back({"head", head});
  return out;
}

Matrix2D embed(const TransformerModel& model, std::span<const int> tokens) {
  const auto& cfg = model.config;
  const int m = static_cast<int>(tokens.size());
  if (m < 1) throw InputError("embed: empty token sequence");
  if (m > cfg.max_seq_len) {
    throw InputError("embed: sequence length " + std::to_string(m) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  Matrix2D h0(m, cfg.d_model);
  for (int i = 0; i < m; ++i) {
    const int id = tokens[i];
    if (id < 0 || id >= cfg.vocab_size) {
      throw InputError("embed: token id " + std::to_string(id) +
                       " out of range at position " + std::to_string(i));
    }
    for (int j = 0; j < cfg.d_model; ++j) {
      h0.at(i, j) = model.token_embedding->at(id, j) + model.positional_embedding->at(i, j);
    }
  }
  h0.check_finite("embed");
  return h0;
}

namespace {

// Attention input projection, optionally LoRA-wrapped.
MatrixRef project(Tape& t, const MatrixRef& x, const MatrixRef& w,
                  const LoraModule* lora, const MatrixRef& h0, const PeftConfig* cfg) {
  if (lora == nullptr) return t.matmul(x, w);
  if (cfg->initial_residual) {
    return lora_apply(t, *lora, x, h0, cfg->lambda, cfg->scale,
                      cfg->lora_mix_frozen_path);
  }
  return lora_apply(t, *lora, x, cfg->scale);
}

MatrixRef apply_adapter_site(Tape& t, const AdapterModule& mod, const MatrixRef& h,
                             const MatrixRef& h0, const PeftConfig& cfg, Site site,
                             const AttachedPeft& peft) {
  if (cfg.initial_residual && peft.injects_at(site)) {
    return adapter_apply(t, mod, h, h0, cfg.lambda, cfg.nonlinearity);
  }
  return adapter_apply(t, mod, h, cfg.nonlinearity);
}

}  // namespace

ForwardTrace forward(const TransformerModel& model, std::span<const int> tokens,
                     Tape& tape, const AttachedPeft* peft, bool pooled) {
  const auto& cfg = model.config;
  if (peft != nullptr && peft->n_layers() != cfg.n_layers) {
    throw ConfigError("forward: attached modules cover " +
                      std::to_string(peft->n_layers()) + " layers, model has " +
                      std::to_string(cfg.n_layers));
  }
  const PeftConfig* pc = peft ? &peft->config() : nullptr;

  ForwardTrace trace;
  {
    Matrix2D h0 = embed(model, tokens);
    trace.h0 = make_matrix(std::move(h0));
    trace.h0->set_requires_grad(false);
  }
  if (cfg.embed_layernorm) {
    trace.h0 = tape.layernorm_rows(trace.h0, model.embed_ln_gain, model.embed_ln_bias,
                                   cfg.layernorm_eps);
  }
  trace.hidden.reserve(cfg.n_layers + 1);
  trace.hidden.push_back(trace.h0);

  const int d = cfg.d_model;
  const int dh = d / cfg.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  MatrixRef h = trace.h0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& w = model.layers[l];
    const LayerPeft* lp = peft ? &peft->layer(l) : nullptr;

    // Attention sublayer.
    auto x = tape.layernorm_rows(h, w.ln1_gain, w.ln1_bias, cfg.layernorm_eps);
    auto q = project(tape, x, w.w_q, lp && lp->lora_q ? &*lp->lora_q : nullptr,
                     trace.h0, pc);
    auto k = project(tape, x, w.w_k, lp && lp->lora_k ? &*lp->lora_k : nullptr,
                     trace.h0, pc);
    auto v = project(tape, x, w.w_v, lp && lp->lora_v ? &*lp->lora_v : nullptr,
                     trace.h0, pc);
    std::vector<MatrixRef> head_outs;
    head_outs.reserve(cfg.n_heads);
    for (int hh = 0; hh < cfg.n_heads; ++hh) {
      auto qh = tape.slice_cols(q, hh * dh, (hh + 1) * dh);
      auto kh = tape.slice_cols(k, hh * dh, (hh + 1) * dh);
      auto vh = tape.slice_cols(v, hh * dh, (hh + 1) * dh);
      auto scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), att_scale);
      auto att = tape.softmax_rows(scores);
      head_outs.push_back(tape.matmul(att, vh));
    }
    auto concat = cfg.n_heads == 1 ? head_outs.front() : tape.concat_cols(head_outs);
    auto att_out = tape.matmul(concat, w.w_o);
    if (lp && lp->adapter_att) {
      att_out = apply_adapter_site(tape, *lp->adapter_att, att_out, trace.h0, *pc,
                                   Site::att, *peft);
    }
    h = tape.add(h, att_out);

    // Feed-forward sublayer.
    auto x2 = tape.layernorm_rows(h, w.ln2_gain, w.ln2_bias, cfg.layernorm_eps);
    auto f1 = project(tape, x2, w.w_ff1, lp && lp->lora_ffn ? &*lp->lora_ffn : nullptr,
                      trace.h0, pc);
    auto f1a = tape.nonlinearity(f1, cfg.nonlinearity);
    auto ffn_out = tape.matmul(f1a, w.w_ff2);
    if (lp && lp->adapter_ffn) {
      ffn_out = apply_adapter_site(tape, *lp->adapter_ffn, ffn_out, trace.h0, *pc,
                                   Site::ffn, *peft);
    }
    h = tape.add(h, ffn_out);
    trace.hidden.push_back(h);
  }

  trace.logits = pooled ? tape.matmul(tape.mean_rows(h), model.head)
                        : tape.matmul(h, model.head);
  return trace;
}

uint64_t base_checksum(const TransformerModel& model) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& p : model.base_parameters()) {
    const uint64_t c = checksum(*p.value);
    h ^= c + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: magic, version, entry count, then per entry
// name_len|name|rows|cols|doubles.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'P', 'L', 'C', 'K', 'P', 'T', '0', '1'};

void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

std::vector<NamedParam> checkpoint_entries(const TransformerModel& model,
                                           const AttachedPeft* peft) {
  auto entries = model.named_parameters();
  if (peft != nullptr) {
    for (const auto& p : peft->trainable()) {
      entries.push_back({"peft/" + p.name, p.value});
    }
  }
  return entries;
}

}  // namespace

void save_checkpoint(const TransformerModel& model, const AttachedPeft* peft,
                     const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open " + path.string());
  os.write(kMagic, sizeof(kMagic));
  const auto entries = checkpoint_entries(model, peft);
  write_u64(os, entries.size());
  for (const auto& e : entries) {
    write_u64(os, e.name.size());
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_u64(os, static_cast<uint64_t>(e.value->rows()));
    write_u64(os, static_cast<uint64_t>(e.value->cols()));
    os.write(reinterpret_cast<const char*>(e.value->values().data()),
             static_cast<std::streamsize>(e.value->values().size() * sizeof(double)));
  }
  if (!os) throw IoError("save_checkpoint: write failed for " + path.string());
}

void load_checkpoint(TransformerModel& model, AttachedPeft* peft,
                     const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("load_checkpoint: bad magic in " + path.string());
  }
  std::map<std::string, MatrixRef> wanted;
  for (auto& e : checkpoint_entries(model, peft)) wanted.emplace(e.name, e.value);

  const uint64_t count = read_u64(is);
  for (uint64_t i = 0; i < count; ++i) {
    const uint64_t name_len = read_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    const auto rows = static_cast<int>(read_u64(is));
    const auto cols = static_cast<int>(read_u64(is));
    auto it = wanted.find(name);
    if (it == wanted.end()) {
      throw IoError("load_checkpoint: unexpected entry '" + name + "'");
    }
    if (it->second->rows() != rows || it->second->cols() != cols) {
      throw ShapeError("load_checkpoint: '" + name + "' is " +
                       std::to_string(rows) + "x" + std::to_string(cols) +
                       " on disk, " + it->second->shape_str() + " in memory");
    }
    is.read(reinterpret_cast<char*>(it->second->values().data()),
            static_cast<std::streamsize>(it->second->values().size() * sizeof(double)));
    if (!is) throw IoError("load_checkpoint: truncated file " + path.string());
  }
}

}  // namespace peftlab
