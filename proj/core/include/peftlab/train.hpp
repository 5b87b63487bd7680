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

#include <iosfwd>
#include <optional>

#include "peftlab/peft.hpp"

namespace peftlab {

enum class TaskKind { token_tagging, sequence_classification };

const char* to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

/// Synthetic supervised tasks. token_tagging labels each position from a
/// local threshold window plus a global count parity, so per-token and
/// sentence-level information both matter; sequence_classification labels a
/// sentence by a global count rule alone.
struct SyntheticTask {
  TaskKind kind = TaskKind::token_tagging;
  int vocab_size = 32;
  int seq_len = 12;
  int n_classes = 4;
  int window = 1;    // rule parameter: how many previous tokens feed the local part
  int modulus = 3;   // rule parameter: tokens divisible by this feed the global count
  uint64_t seed = 99;
  int n_train = 256;
  int n_eval = 64;

  void validate() const;
};

struct Example {
  std::vector<int> tokens;
  std::vector<int> labels;  // one per token (tagging) or a single label
};

struct Dataset {
  std::vector<Example> examples;
};

/// Deterministic in (task, n): token sequences are unique within one call, so
/// consecutive slices of generate(task, n_train + n_eval) are disjoint splits.
Dataset generate(const SyntheticTask& task, int n);
/// Disjoint train/eval datasets of task.n_train and task.n_eval examples.
std::pair<Dataset, Dataset> generate_splits(const SyntheticTask& task);

/// The label rule, exposed for oracle-style checks.
std::vector<int> task_labels(const SyntheticTask& task, const std::vector<int>& tokens);

struct TrainConfig {
  double learning_rate = 3e-4;
  int batch_size = 16;
  int micro_batch = 4;   // gradient-accumulation chunk
  int epochs = 3;
  double warmup_ratio = 0.06;
  enum class Schedule { linear };
  Schedule schedule = Schedule::linear;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 7;

  void validate() const;
};

/// Linear warmup to the peak at round(warmup_ratio * total_steps), then
/// linear decay to 0 at total_steps. lr_at(0) == 0 whenever warmup is
/// nonempty; lr_at(total_steps) == 0 always.
double lr_at(long long step, long long total_steps, const TrainConfig& cfg);

/// Per-parameter first/second moment buffers plus the shared step count.
struct AdamWState {
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;
  long long t = 0;

  static AdamWState init(std::span<const NamedParam> params);
};

/// One decoupled-weight-decay Adam step over params' accumulated gradients.
/// Decay applies as theta -= lr*wd*theta before the adaptive update. NaN in
/// any gradient aborts with the failing parameter name.
void adamw_step(std::span<const NamedParam> params, AdamWState& state, double lr,
                const TrainConfig& cfg);

struct StepRecord {
  long long step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> accuracy;  // present on epoch boundaries
};

struct TrainedRun {
  std::vector<StepRecord> curve;
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;
  long long total_steps = 0;
  uint64_t base_checksum_before = 0;
  uint64_t base_checksum_after = 0;
};

double evaluate_accuracy(const TransformerModel& model, const AttachedPeft* peft,
                         const Dataset& data, TaskKind kind);

/// Cross-entropy fine-tuning of the attached PEFT parameters (plus the head
/// when trainable). Micro-batches accumulate gradients example by example in
/// a fixed order, so (batch_size, micro_batch) splits of the same batch give
/// bitwise-identical steps. Streams CSV rows "step,lr,loss[,acc]" to
/// csv_stream when given. Deterministic in (model, peft, task, cfg).
TrainedRun train(TransformerModel& model, AttachedPeft& peft, const SyntheticTask& task,
                 const TrainConfig& cfg, std::ostream* csv_stream = nullptr);

}  // namespace peftlab
