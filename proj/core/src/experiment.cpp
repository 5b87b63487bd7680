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
#include "peftlab/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

namespace peftlab {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::set<Site> sites_from_json(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw ConfigError(where + " must be an array of site names");
  std::set<Site> out;
  for (const auto& s : arr) out.insert(site_from_string(s.get<std::string>()));
  return out;
}

json sites_to_json(const std::set<Site>& sites) {
  json arr = json::array();
  for (Site s : sites) arr.push_back(to_string(s));
  return arr;
}

}  // namespace

void ExperimentSpec::validate() const {
  model.validate();
  peft.validate(model);
  train.validate();
  task.validate();
  std::string problems;
  auto fail = [&](const std::string& p) {
    if (!problems.empty()) problems += "; ";
    problems += p;
  };
  if (task.n_classes != model.n_classes) {
    fail("task.n_classes (" + std::to_string(task.n_classes) + ") != model.n_classes (" +
         std::to_string(model.n_classes) + ")");
  }
  if (task.vocab_size > model.vocab_size) {
    fail("task.vocab_size exceeds model.vocab_size");
  }
  if (task.seq_len > model.max_seq_len) fail("task.seq_len exceeds model.max_seq_len");
  if (run_id.empty() || run_id.find('/') != std::string::npos) {
    fail("run_id must be a nonempty path-free name");
  }
  if (sweeps && sweeps->lambdas.empty()) fail("sweeps.lambdas must be nonempty when present");
  if (similarity_sentences < 1) fail("similarity_sentences must be >= 1");
  if (!problems.empty()) throw ConfigError("invalid experiment spec: " + problems);
}

json spec_to_json(const ExperimentSpec& spec) {
  json j;
  j["run_id"] = spec.run_id;
  j["output_dir"] = spec.output_dir.string();
  j["paired_vanilla"] = spec.paired_vanilla;
  j["similarity_sentences"] = spec.similarity_sentences;
  j["model"] = {
      {"d_model", spec.model.d_model},
      {"n_layers", spec.model.n_layers},
      {"n_heads", spec.model.n_heads},
      {"d_ff", spec.model.d_ff},
      {"vocab_size", spec.model.vocab_size},
      {"max_seq_len", spec.model.max_seq_len},
      {"n_classes", spec.model.n_classes},
      {"nonlinearity", to_string(spec.model.nonlinearity)},
      {"seed", spec.model.seed},
      {"train_head", spec.model.train_head},
      {"embed_layernorm", spec.model.embed_layernorm},
      {"layernorm_eps", spec.model.layernorm_eps},
  };
  j["peft"] = {
      {"kind", to_string(spec.peft.kind)},
      {"r", spec.peft.r},
      {"lambda", spec.peft.lambda},
      {"scale", spec.peft.scale},
      {"initial_residual", spec.peft.initial_residual},
      {"placement", sites_to_json(spec.peft.placement)},
      {"injection_sites", sites_to_json(spec.peft.injection_sites)},
      {"nonlinearity", to_string(spec.peft.nonlinearity)},
      {"lora_mix_frozen_path", spec.peft.lora_mix_frozen_path},
      {"seed", spec.peft_seed},
  };
  j["train"] = {
      {"learning_rate", spec.train.learning_rate},
      {"batch_size", spec.train.batch_size},
      {"micro_batch", spec.train.micro_batch},
      {"epochs", spec.train.epochs},
      {"warmup_ratio", spec.train.warmup_ratio},
      {"schedule", "linear"},
      {"weight_decay", spec.train.weight_decay},
      {"beta1", spec.train.beta1},
      {"beta2", spec.train.beta2},
      {"adam_eps", spec.train.adam_eps},
      {"seed", spec.train.seed},
  };
  j["task"] = {
      {"kind", to_string(spec.task.kind)},
      {"vocab_size", spec.task.vocab_size},
      {"seq_len", spec.task.seq_len},
      {"n_classes", spec.task.n_classes},
      {"window", spec.task.window},
      {"modulus", spec.task.modulus},
      {"seed", spec.task.seed},
      {"n_train", spec.task.n_train},
      {"n_eval", spec.task.n_eval},
  };
  if (spec.sweeps) j["sweeps"] = {{"lambdas", spec.sweeps->lambdas}};
  return j;
}

ExperimentSpec spec_from_json(const json& j) {
  check_keys(j, "", {"run_id", "output_dir", "paired_vanilla", "similarity_sentences",
                     "model", "peft", "train", "task", "sweeps"});
  ExperimentSpec spec;
  read_field(j, "run_id", spec.run_id);
  if (j.contains("output_dir")) spec.output_dir = j.at("output_dir").get<std::string>();
  read_field(j, "paired_vanilla", spec.paired_vanilla);
  read_field(j, "similarity_sentences", spec.similarity_sentences);

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model",
               {"d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_seq_len",
                "n_classes", "nonlinearity", "seed", "train_head", "embed_layernorm",
                "layernorm_eps"});
    read_field(m, "d_model", spec.model.d_model);
    read_field(m, "n_layers", spec.model.n_layers);
    read_field(m, "n_heads", spec.model.n_heads);
    read_field(m, "d_ff", spec.model.d_ff);
    read_field(m, "vocab_size", spec.model.vocab_size);
    read_field(m, "max_seq_len", spec.model.max_seq_len);
    read_field(m, "n_classes", spec.model.n_classes);
    if (m.contains("nonlinearity")) {
      spec.model.nonlinearity = nonlinearity_from_string(m.at("nonlinearity"));
    }
    read_field(m, "seed", spec.model.seed);
    read_field(m, "train_head", spec.model.train_head);
    read_field(m, "embed_layernorm", spec.model.embed_layernorm);
    read_field(m, "layernorm_eps", spec.model.layernorm_eps);
  }

  if (j.contains("peft")) {
    const auto& p = j.at("peft");
    check_keys(p, "peft",
               {"kind", "r", "lambda", "scale", "initial_residual", "placement",
                "injection_sites", "nonlinearity", "lora_mix_frozen_path", "seed"});
    if (p.contains("kind")) spec.peft.kind = peft_kind_from_string(p.at("kind"));
    // Kind-appropriate defaults, then explicit fields on top.
    spec.peft = spec.peft.kind == PeftKind::adapter ? PeftConfig::adapter_defaults()
                                                    : PeftConfig::lora_defaults();
    read_field(p, "r", spec.peft.r);
    read_field(p, "lambda", spec.peft.lambda);
    read_field(p, "scale", spec.peft.scale);
    read_field(p, "initial_residual", spec.peft.initial_residual);
    if (p.contains("placement")) {
      spec.peft.placement = sites_from_json(p.at("placement"), "peft.placement");
    }
    if (p.contains("injection_sites")) {
      spec.peft.injection_sites = sites_from_json(p.at("injection_sites"), "peft.injection_sites");
    }
    if (p.contains("nonlinearity")) {
      spec.peft.nonlinearity = nonlinearity_from_string(p.at("nonlinearity"));
    }
    read_field(p, "lora_mix_frozen_path", spec.peft.lora_mix_frozen_path);
    read_field(p, "seed", spec.peft_seed);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train",
               {"learning_rate", "batch_size", "micro_batch", "epochs", "warmup_ratio",
                "schedule", "weight_decay", "beta1", "beta2", "adam_eps", "seed"});
    read_field(t, "learning_rate", spec.train.learning_rate);
    read_field(t, "batch_size", spec.train.batch_size);
    read_field(t, "micro_batch", spec.train.micro_batch);
    read_field(t, "epochs", spec.train.epochs);
    read_field(t, "warmup_ratio", spec.train.warmup_ratio);
    if (t.contains("schedule") && t.at("schedule") != "linear") {
      throw ConfigError("train.schedule: only 'linear' is supported");
    }
    read_field(t, "weight_decay", spec.train.weight_decay);
    read_field(t, "beta1", spec.train.beta1);
    read_field(t, "beta2", spec.train.beta2);
    read_field(t, "adam_eps", spec.train.adam_eps);
    read_field(t, "seed", spec.train.seed);
  }

  if (j.contains("task")) {
    const auto& t = j.at("task");
    check_keys(t, "task",
               {"kind", "vocab_size", "seq_len", "n_classes", "window", "modulus",
                "seed", "n_train", "n_eval"});
    if (t.contains("kind")) spec.task.kind = task_kind_from_string(t.at("kind"));
    read_field(t, "vocab_size", spec.task.vocab_size);
    read_field(t, "seq_len", spec.task.seq_len);
    read_field(t, "n_classes", spec.task.n_classes);
    read_field(t, "window", spec.task.window);
    read_field(t, "modulus", spec.task.modulus);
    read_field(t, "seed", spec.task.seed);
    read_field(t, "n_train", spec.task.n_train);
    read_field(t, "n_eval", spec.task.n_eval);
  }

  if (j.contains("sweeps")) {
    const auto& s = j.at("sweeps");
    check_keys(s, "sweeps", {"lambdas"});
    SweepSpec sw;
    read_field(s, "lambdas", sw.lambdas);
    spec.sweeps = std::move(sw);
  }

  spec.validate();
  return spec;
}

json default_spec_json() {
  ExperimentSpec spec;
  spec.peft = PeftConfig::lora_defaults();
  spec.peft.initial_residual = true;
  return spec_to_json(spec);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects path=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;  // plain string

  json* node = &j;
  size_t begin = 0;
  while (true) {
    const auto dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot - begin);
    if (key.empty()) throw ConfigError("--set: empty key in path '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    begin = dot + 1;
  }
}

ExperimentSpec load_spec(const std::filesystem::path& path,
                         const std::vector<std::string>& overrides) {
  json j;
  if (path.empty()) {
    j = default_spec_json();
  } else {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path.string());
    try {
      j = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return spec_from_json(j);
}

namespace {

json budget_to_json(const Budget& b) {
  return {
      {"trainable_params", b.trainable_params},
      {"head_params", b.head_params},
      {"peft_flops", b.peft_flops},
      {"injection_overhead_flops", b.injection_overhead_flops},
      {"convention",
       {{"name", b.convention.name},
        {"adapter_mix_flops_per_dim", b.convention.adapter_mix_flops_per_dim},
        {"lora_mix_flops_per_dim", b.convention.lora_mix_flops_per_dim}}},
  };
}

void write_json_file(const json& j, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed for " + path.string());
}

/// Similarity profile over the first `limit` eval sentences.
SimilarityReport profile_after_training(const TransformerModel& model,
                                        const AttachedPeft& peft,
                                        const SyntheticTask& task, int limit,
                                        RunMeta meta) {
  auto [train_set, eval_set] = generate_splits(task);
  const int n = std::min<int>(limit, static_cast<int>(eval_set.examples.size()));
  std::vector<ForwardTrace> traces;
  traces.reserve(n);
  const bool pooled = task.kind == TaskKind::sequence_classification;
  for (int i = 0; i < n; ++i) {
    Tape tape;
    traces.push_back(forward(model, eval_set.examples[i].tokens, tape, &peft, pooled));
  }
  return layer_profile(traces, std::move(meta));
}

}  // namespace

RunResult run_experiment(const ExperimentSpec& spec, bool dry_run) {
  spec.validate();
  const auto dir = spec.output_dir / spec.run_id;
  std::filesystem::create_directories(dir);

  RunResult result;
  result.dir = dir;
  write_json_file(spec_to_json(spec), dir / "config.json");
  result.budget = flops_count(spec.model, spec.peft);
  write_json_file(budget_to_json(result.budget), dir / "budget.json");
  if (dry_run) return result;

  auto model = build_model(spec.model);
  auto peft = attach(model, spec.peft, spec.peft_seed);
  {
    std::ofstream csv(dir / "metrics.csv");
    if (!csv) throw IoError("cannot open " + (dir / "metrics.csv").string());
    result.trained = train(model, peft, spec.task, spec.train, &csv);
  }

  RunMeta meta{spec.model.seed, spec.peft.initial_residual ? spec.peft.lambda : 0.0,
               std::string(to_string(spec.peft.kind)) +
                   (spec.peft.initial_residual ? "+ir" : ""),
               to_string(spec.task.kind)};
  result.profile = profile_after_training(model, peft, spec.task,
                                          spec.similarity_sentences, meta);
  write_profile_csv(result.profile, dir / "profile.csv");

  // Last-layer heatmap of the first profiled sentence.
  const auto& last = result.profile.per_sentence.front().back();
  heatmap_export(last, dir / (spec.run_id + ".last_layer"));

  save_checkpoint(model, &peft, dir / "checkpoint.bin");

  if (spec.paired_vanilla && spec.peft.initial_residual) {
    ExperimentSpec twin = spec;
    twin.peft.initial_residual = false;
    twin.output_dir = dir;
    twin.run_id = "vanilla";
    twin.paired_vanilla = false;
    auto vanilla = run_experiment(twin, false);
    result.comparison = last_layers_compare(
        vanilla.profile, result.profile,
        std::min(5, static_cast<int>(result.profile.per_layer_mean.size())));
    write_compare_csv(*result.comparison, dir / "compare.csv");
  }
  return result;
}

std::vector<SweepRow> sweep_lambda(const ExperimentSpec& spec,
                                   const std::vector<double>& lambdas) {
  if (lambdas.empty()) throw InputError("sweep_lambda: empty lambda list");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l < 1.0)) {
      throw InputError("sweep_lambda: lambda " + fmt(l) + " outside [0, 1)");
    }
  }
  const auto parent = spec.output_dir / spec.run_id;
  std::filesystem::create_directories(parent);

  std::vector<SweepRow> rows;
  for (double lambda : lambdas) {
    ExperimentSpec member = spec;
    member.peft.lambda = lambda;
    member.peft.initial_residual = true;
    member.output_dir = parent;
    char name[32];
    std::snprintf(name, sizeof(name), "lambda_%.3f", lambda);
    member.run_id = name;
    member.sweeps.reset();
    auto res = run_experiment(member, false);
    rows.push_back({lambda, res.trained.final_accuracy,
                    res.profile.per_layer_mean.back()});
  }

  std::ofstream os(parent / "summary.csv");
  if (!os) throw IoError("cannot open " + (parent / "summary.csv").string());
  os << "lambda,accuracy,last_layer_similarity\n";
  for (const auto& r : rows) {
    os << fmt(r.lambda) << "," << fmt(r.accuracy) << "," << fmt(r.last_layer_similarity)
       << "\n";
  }
  return rows;
}

std::vector<PlacementRow> ablate_placement(const ExperimentSpec& spec,
                                           const std::vector<uint64_t>& seeds_in) {
  std::vector<uint64_t> seeds = seeds_in;
  if (seeds.empty()) seeds.push_back(spec.model.seed);
  const auto parent = spec.output_dir / spec.run_id;
  std::filesystem::create_directories(parent);

  struct Variant {
    std::string name;
    PeftConfig cfg;
  };
  std::vector<Variant> variants;
  if (spec.peft.kind == PeftKind::adapter) {
    for (const auto& [name, sites] :
         std::vector<std::pair<std::string, std::set<Site>>>{
             {"att", {Site::att}}, {"ffn", {Site::ffn}}, {"both", {Site::att, Site::ffn}}}) {
      PeftConfig cfg = spec.peft;
      cfg.placement = {Site::att, Site::ffn};
      cfg.injection_sites = sites;
      cfg.initial_residual = true;
      variants.push_back({name, cfg});
    }
  } else {
    PeftConfig low_rank = spec.peft;
    low_rank.initial_residual = true;
    low_rank.injection_sites = {Site::all_low_rank};
    low_rank.lora_mix_frozen_path = false;
    PeftConfig with_frozen = low_rank;
    with_frozen.lora_mix_frozen_path = true;
    variants.push_back({"low_rank", low_rank});
    variants.push_back({"frozen_path", with_frozen});
  }

  std::vector<PlacementRow> rows;
  for (uint64_t seed_offset : seeds) {
    for (const auto& variant : variants) {
      ExperimentSpec member = spec;
      member.peft = variant.cfg;
      member.model.seed = seed_offset;
      member.train.seed = spec.train.seed + seed_offset;
      member.peft_seed = spec.peft_seed + seed_offset;
      member.output_dir = parent;
      member.run_id = variant.name + "_seed" + std::to_string(seed_offset);
      member.sweeps.reset();
      auto res = run_experiment(member, false);
      rows.push_back({variant.name, seed_offset, res.trained.final_accuracy,
                      res.profile.per_layer_mean.back()});
    }
  }

  std::ofstream os(parent / "summary.csv");
  if (!os) throw IoError("cannot open " + (parent / "summary.csv").string());
  os << "variant,seed,accuracy,last_layer_similarity\n";
  for (const auto& r : rows) {
    os << r.variant << "," << r.seed << "," << fmt(r.accuracy) << ","
       << fmt(r.last_layer_similarity) << "\n";
  }
  // Winner per seed, by accuracy.
  for (uint64_t s : seeds) {
    const PlacementRow* best = nullptr;
    for (const auto& r : rows) {
      if (r.seed == s && (best == nullptr || r.accuracy > best->accuracy)) best = &r;
    }
    if (best) os << "# winner seed " << s << ": " << best->variant << "\n";
  }
  return rows;
}

BenchResult bench_overhead(const ExperimentSpec& spec, int iterations) {
  if (iterations < 1) throw InputError("bench_overhead: iterations must be >= 1");
  ExperimentSpec injected = spec;
  injected.peft.initial_residual = true;
  if (injected.peft.lambda == 0.0) {
    injected.peft.lambda =
        injected.peft.kind == PeftKind::adapter ? 0.2 : 0.6;
  }
  ExperimentSpec vanilla = injected;
  vanilla.peft.initial_residual = false;

  const auto data = generate(spec.task, 1);
  const auto& ex = data.examples.front();
  const bool pooled = spec.task.kind == TaskKind::sequence_classification;

  auto time_variant = [&](const ExperimentSpec& s) {
    auto model = build_model(s.model);
    auto peft = attach(model, s.peft, s.peft_seed);
    auto pass = [&]() {
      Tape tape;
      auto trace = forward(model, ex.tokens, tape, &peft, pooled);
      auto loss = tape.softmax_cross_entropy(trace.logits, ex.labels);
      tape.backward(loss);
    };
    for (int i = 0; i < 10; ++i) pass();  // warmup
    double best = 0.0;
    for (int rep = 0; rep < 3; ++rep) {
      const auto begin = std::chrono::steady_clock::now();
      for (int i = 0; i < iterations; ++i) pass();
      const auto end = std::chrono::steady_clock::now();
      const double secs = std::chrono::duration<double>(end - begin).count();
      if (rep == 0 || secs < best) best = secs;
    }
    return best;
  };

  BenchResult result;
  result.iterations = iterations;
  result.vanilla_seconds = time_variant(vanilla);
  result.injected_seconds = time_variant(injected);
  result.ratio = result.injected_seconds / result.vanilla_seconds;
  return result;
}

json error_json(const std::string& stage, const std::string& message,
                const std::string& context) {
  return {{"stage", stage}, {"message", message}, {"context", context}};
}

}  // namespace peftlab
