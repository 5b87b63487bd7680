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

#include <nlohmann/json.hpp>

#include "peftlab/budget.hpp"
#include "peftlab/diagnostics.hpp"
#include "peftlab/train.hpp"

namespace peftlab {

struct SweepSpec {
  std::vector<double> lambdas;
};

/// A fully-resolved experiment: everything a run needs, and everything a run
/// directory's config.json snapshot records.
struct ExperimentSpec {
  ModelConfig model;
  PeftConfig peft;
  uint64_t peft_seed = 1234;
  TrainConfig train;
  SyntheticTask task;
  std::optional<SweepSpec> sweeps;
  std::filesystem::path output_dir = "runs";
  std::string run_id = "run";
  /// Also run a matched-seed vanilla twin and emit a last-layers comparison.
  bool paired_vanilla = false;
  /// How many eval sentences feed the similarity profile.
  int similarity_sentences = 32;

  void validate() const;
};

nlohmann::json spec_to_json(const ExperimentSpec& spec);
ExperimentSpec spec_from_json(const nlohmann::json& j);

/// Built-in desk-scale defaults (d=64, L=8 LoRA run on token tagging).
nlohmann::json default_spec_json();

/// Applies one "--set path=value" override; the value parses as JSON when it
/// can and falls back to a raw string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads the config file (or the built-in defaults when path is empty) and
/// applies overrides in order.
ExperimentSpec load_spec(const std::filesystem::path& path,
                         const std::vector<std::string>& overrides);

struct RunResult {
  std::filesystem::path dir;
  TrainedRun trained;
  SimilarityReport profile;
  Budget budget;
  std::optional<CompareTable> comparison;  // present for paired runs
};

/// Executes train + diagnostics into <output_dir>/<run_id>/: config.json
/// (resolved snapshot), budget.json, metrics.csv, profile.csv, a last-layer
/// heatmap pair, and compare.csv for paired runs. dry_run stops after the
/// snapshot and budget. Reruns of an identical snapshot rewrite byte-identical
/// artifacts.
RunResult run_experiment(const ExperimentSpec& spec, bool dry_run = false);

struct SweepRow {
  double lambda = 0.0;
  double accuracy = 0.0;
  double last_layer_similarity = 0.0;
};

/// One run per lambda with shared seeds; writes per-lambda run directories
/// plus summary.csv under <output_dir>/<run_id>/.
std::vector<SweepRow> sweep_lambda(const ExperimentSpec& spec,
                                   const std::vector<double>& lambdas);

struct PlacementRow {
  std::string variant;
  uint64_t seed = 0;
  double accuracy = 0.0;
  double last_layer_similarity = 0.0;
};

/// Matched-seed placement ablation. Adapter: injection at att / ffn / both.
/// LoRA: mixed input into the low-rank branch only vs. also through the
/// frozen weights. Writes summary.csv; returns one row per (variant, seed).
std::vector<PlacementRow> ablate_placement(const ExperimentSpec& spec,
                                           const std::vector<uint64_t>& seeds = {});

struct BenchResult {
  double vanilla_seconds = 0.0;
  double injected_seconds = 0.0;
  double ratio = 0.0;  // injected / vanilla
  int iterations = 0;
};

/// Times `iterations` forward+backward passes on one fixed example, vanilla
/// vs. injected, identical seeds. Best of three repetitions each.
BenchResult bench_overhead(const ExperimentSpec& spec, int iterations);

/// Machine-readable error envelope used by the CLI: {stage, message, context}.
nlohmann::json error_json(const std::string& stage, const std::string& message,
                          const std::string& context);

}  // namespace peftlab
