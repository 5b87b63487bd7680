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
#include "peftlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <set>

namespace peftlab {

const char* to_string(TaskKind kind) {
  return kind == TaskKind::token_tagging ? "token_tagging" : "sequence_classification";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "token_tagging") return TaskKind::token_tagging;
  if (s == "sequence_classification") return TaskKind::sequence_classification;
  throw ConfigError("unknown task kind '" + s + "'");
}

void SyntheticTask::validate() const {
  std::string problems;
  auto fail = [&](const std::string& p) {
    if (!problems.empty()) problems += "; ";
    problems += p;
  };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (seq_len < 2) fail("seq_len must be >= 2");
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (window < 0) fail("window must be >= 0");
  if (modulus < 1) fail("modulus must be >= 1");
  if (n_train < 1) fail("n_train must be >= 1");
  if (n_eval < 1) fail("n_eval must be >= 1");
  if (!problems.empty()) throw ConfigError("invalid task config: " + problems);
}

std::vector<int> task_labels(const SyntheticTask& task, const std::vector<int>& tokens) {
  const int m = static_cast<int>(tokens.size());
  int global_count = 0;
  for (int t : tokens) {
    if (t % task.modulus == 0) ++global_count;
  }
  const int parity = global_count % 2;

  if (task.kind == TaskKind::sequence_classification) {
    return {global_count % task.n_classes};
  }

  // Per-position: binary threshold features of the token and the `window`
  // tokens before it, packed into an integer, shifted by the global parity.
  const int half = task.vocab_size / 2;
  std::vector<int> labels(m);
  for (int i = 0; i < m; ++i) {
    int local = 0;
    for (int w = 0; w <= task.window; ++w) {
      const int idx = i - w;
      const int bit = (idx >= 0 && tokens[idx] >= half) ? 1 : 0;
      local = local * 2 + bit;
    }
    labels[i] = (local + parity) % task.n_classes;
  }
  return labels;
}

Dataset generate(const SyntheticTask& task, int n) {
  task.validate();
  if (n < 1) throw InputError("generate: n must be >= 1");
  std::mt19937_64 rng(task.seed);
  std::uniform_int_distribution<int> tok(0, task.vocab_size - 1);

  Dataset data;
  data.examples.reserve(n);
  std::set<std::vector<int>> seen;
  while (static_cast<int>(data.examples.size()) < n) {
    std::vector<int> tokens(task.seq_len);
    for (auto& t : tokens) t = tok(rng);
    if (!seen.insert(tokens).second) continue;  // keep sequences unique
    Example ex;
    ex.labels = task_labels(task, tokens);
    ex.tokens = std::move(tokens);
    data.examples.push_back(std::move(ex));
  }
  return data;
}

std::pair<Dataset, Dataset> generate_splits(const SyntheticTask& task) {
  Dataset all = generate(task, task.n_train + task.n_eval);
  Dataset train_set, eval_set;
  train_set.examples.assign(all.examples.begin(), all.examples.begin() + task.n_train);
  eval_set.examples.assign(all.examples.begin() + task.n_train, all.examples.end());
  return {std::move(train_set), std::move(eval_set)};
}

void TrainConfig::validate() const {
  std::string problems;
  auto fail = [&](const std::string& p) {
    if (!problems.empty()) problems += "; ";
    problems += p;
  };
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (micro_batch < 1) fail("micro_batch must be >= 1");
  if (batch_size % micro_batch != 0) fail("micro_batch must divide batch_size");
  if (epochs < 1) fail("epochs must be >= 1");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio must lie in [0, 1)");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (!problems.empty()) throw ConfigError("invalid train config: " + problems);
}

double lr_at(long long step, long long total_steps, const TrainConfig& cfg) {
  if (total_steps < 1) throw InputError("lr_at: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw InputError("lr_at: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(total_steps) + "]");
  }
  const auto warmup = static_cast<long long>(std::llround(cfg.warmup_ratio * total_steps));
  if (step < warmup) {
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total_steps == warmup) return 0.0;
  return cfg.learning_rate * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

AdamWState AdamWState::init(std::span<const NamedParam> params) {
  AdamWState state;
  state.slots.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    state.slots[i].m.assign(params[i].value->size(), 0.0);
    state.slots[i].v.assign(params[i].value->size(), 0.0);
  }
  return state;
}

void adamw_step(std::span<const NamedParam> params, AdamWState& state, double lr,
                const TrainConfig& cfg) {
  if (state.slots.size() != params.size()) {
    throw InputError("adamw_step: state initialized for " +
                     std::to_string(state.slots.size()) + " params, got " +
                     std::to_string(params.size()));
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& mat = *params[p].value;
    auto& slot = state.slots[p];
    const auto& g = mat.grad();  // allocates zeros when nothing was accumulated
    for (int i = 0; i < mat.size(); ++i) {
      if (std::isnan(g[i])) {
        throw NonFiniteError("adamw_step: NaN gradient in " + params[p].name +
                             " at flat index " + std::to_string(i));
      }
      double& theta = mat.values()[i];
      theta -= lr * cfg.weight_decay * theta;  // decoupled decay
      slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
      slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      theta -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

namespace {

std::vector<NamedParam> collect_trainable(const TransformerModel& model,
                                          const AttachedPeft& peft) {
  std::vector<NamedParam> params(peft.trainable().begin(), peft.trainable().end());
  if (model.head->requires_grad()) params.push_back({"head", model.head});
  return params;
}

int argmax_row(const Matrix2D& m, int row) {
  int best = 0;
  for (int j = 1; j < m.cols(); ++j) {
    if (m.at(row, j) > m.at(row, best)) best = j;
  }
  return best;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double evaluate_accuracy(const TransformerModel& model, const AttachedPeft* peft,
                         const Dataset& data, TaskKind kind) {
  if (data.examples.empty()) throw InputError("evaluate_accuracy: empty dataset");
  long long correct = 0, total = 0;
  const bool pooled = kind == TaskKind::sequence_classification;
  for (const auto& ex : data.examples) {
    Tape tape;
    auto trace = forward(model, ex.tokens, tape, peft, pooled);
    if (pooled) {
      correct += argmax_row(*trace.logits, 0) == ex.labels[0] ? 1 : 0;
      total += 1;
    } else {
      for (size_t i = 0; i < ex.tokens.size(); ++i) {
        correct += argmax_row(*trace.logits, static_cast<int>(i)) == ex.labels[i] ? 1 : 0;
        total += 1;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

TrainedRun train(TransformerModel& model, AttachedPeft& peft, const SyntheticTask& task,
                 const TrainConfig& cfg, std::ostream* csv_stream) {
  cfg.validate();
  auto [train_set, eval_set] = generate_splits(task);
  const auto params = collect_trainable(model, peft);
  auto state = AdamWState::init(params);
  const bool pooled = task.kind == TaskKind::sequence_classification;

  TrainedRun run;
  run.base_checksum_before = base_checksum(model);
  run.initial_accuracy = evaluate_accuracy(model, &peft, eval_set, task.kind);

  const long long batches_per_epoch =
      static_cast<long long>(train_set.examples.size()) / cfg.batch_size;
  if (batches_per_epoch < 1) {
    throw ConfigError("train: n_train (" + std::to_string(train_set.examples.size()) +
                      ") smaller than batch_size (" + std::to_string(cfg.batch_size) + ")");
  }
  run.total_steps = batches_per_epoch * cfg.epochs;

  if (csv_stream) *csv_stream << "step,lr,loss,acc\n";

  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<size_t> order(train_set.examples.size());
  std::iota(order.begin(), order.end(), size_t{0});

  long long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (long long b = 0; b < batches_per_epoch; ++b) {
      for (const auto& p : params) p.value->zero_grad();
      double batch_loss = 0.0;
      // Examples accumulate one at a time in a fixed order; micro_batch only
      // sets how many share a tape-clear boundary, so the split cannot change
      // the summed gradient.
      for (int e = 0; e < cfg.batch_size; ++e) {
        const auto& ex = train_set.examples[order[b * cfg.batch_size + e]];
        Tape tape;
        try {
          auto trace = forward(model, ex.tokens, tape, &peft, pooled);
          auto loss = tape.softmax_cross_entropy(trace.logits, ex.labels);
          auto scaled = tape.scale(loss, 1.0 / cfg.batch_size);
          tape.backward(scaled);
          batch_loss += scaled->at(0, 0);
        } catch (const NonFiniteError& err) {
          throw DivergenceError("train: diverged at step " + std::to_string(step + 1) +
                                    " (" + err.what() + "); last loss " +
                                    fmt(batch_loss),
                                step + 1);
        }
      }
      if (std::isnan(batch_loss)) {
        throw DivergenceError("train: NaN loss at step " + std::to_string(step + 1),
                              step + 1);
      }
      step += 1;
      const double lr = lr_at(step, run.total_steps, cfg);
      adamw_step(params, state, lr, cfg);

      StepRecord rec{step, lr, batch_loss, std::nullopt};
      if (b == batches_per_epoch - 1) {
        rec.accuracy = evaluate_accuracy(model, &peft, eval_set, task.kind);
      }
      if (csv_stream) {
        *csv_stream << step << "," << fmt(lr) << "," << fmt(batch_loss);
        if (rec.accuracy) *csv_stream << "," << fmt(*rec.accuracy);
        *csv_stream << "\n";
      }
      run.curve.push_back(std::move(rec));
    }
  }

  run.final_accuracy = run.curve.empty() || !run.curve.back().accuracy
                           ? run.initial_accuracy
                           : *run.curve.back().accuracy;
  run.base_checksum_after = base_checksum(model);
  return run;
}

}  // namespace peftlab
