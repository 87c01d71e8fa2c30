// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Optimizer, learning-rate schedules, merge-and-reinit, and the training loop
// for the memorization task.

#pragma once

#include "mora/tasks.hpp"

#include <cmath>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mora {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Bias-corrected adaptive moments with decoupled weight decay. Each
/// parameter keeps its own step counter so a subset can be reset.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// `decay[i]` selects which parameters receive weight decay.
  void step(const std::vector<Matrix<T>*>& params, const std::vector<Matrix<T>>& grads, const std::vector<bool>& decay,
            double lr);
  void reset();
  void reset(std::size_t index);

  const AdamWConfig& config() const { return cfg_; }
  std::size_t steps(std::size_t index) const { return index < t_.size() ? t_[index] : 0; }
  const Matrix<T>& first_moment(std::size_t index) const { return m_.at(index); }
  const Matrix<T>& second_moment(std::size_t index) const { return v_.at(index); }

 private:
  AdamWConfig cfg_;
  std::vector<Matrix<T>> m_, v_;
  std::vector<std::size_t> t_;
};

enum class ScheduleShape { Constant, Linear, Cosine };
const char* schedule_name(ScheduleShape s);
ScheduleShape parse_schedule(const std::string& s);

struct Schedule {
  ScheduleShape shape = ScheduleShape::Constant;
  double base_lr = 1e-3;
  std::size_t total = 1;
  std::size_t warmup = 0;
  std::size_t restart_warmup = 50;
  std::vector<std::size_t> restarts;  // ascending

  /// Base shape times initial warmup times the re-warmup after the latest
  /// restart mark.
  double lr_at(std::size_t step) const;
};

enum class AdapterKind { None, Mora, Lora, Full };
const char* adapter_kind_name(AdapterKind k);
AdapterKind parse_adapter_kind(const std::string& s);

struct TrainConfig {
  AdapterKind kind = AdapterKind::Mora;
  std::size_t r = 8;
  OperatorKind op = OperatorKind::rotation();
  double alpha = 0;           // 0 selects 2r
  double lora_init_std = 0;   // 0 selects 1/sqrt(r)
  double lr = 3e-3;
  std::size_t steps = 2000;
  std::size_t batch = 64;
  std::size_t merge_every = 0;  // 0 disables merge-and-reinit
  ScheduleShape schedule = ScheduleShape::Constant;
  std::size_t warmup = 0;
  std::size_t restart_warmup = 50;
  double weight_decay = 0;
  std::size_t eval_every = 25;  // 0 disables evaluation
  double target_accuracy = 0.99;
  bool stop_at_target = false;
  std::uint64_t seed = 0;

  double effective_alpha() const { return alpha > 0 ? alpha : 2.0 * static_cast<double>(r); }
  double effective_init_std() const { return lora_init_std > 0 ? lora_init_std : 1.0 / std::sqrt(static_cast<double>(r)); }
  Schedule make_schedule() const;
  /// Throws InvalidArgument naming the offending field.
  void validate() const;
};

struct MetricRow {
  std::size_t step = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> eval_accuracy;
  bool merge = false;
};

struct TrainResult {
  std::vector<MetricRow> rows;
  std::optional<std::size_t> steps_to_target;  // first evaluated step count at or above target
  double final_loss = 0;
  double final_accuracy = 0;
  std::size_t merges = 0;
};

void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows);

/// Attaches the adapters named by `cfg` (replacing any existing ones).
void attach_adapters(TinyLM<float>& model, const TrainConfig& cfg, std::mt19937_64& rng);

enum class MergeMode { ReMoRA, ReLoRA };

/// Folds every live adapter into its base weight, records the increment in
/// the slot's merged_delta and reinitializes the adapter: ReMoRA zeroes M and
/// flips the Sharing scheme, ReLoRA resamples A and zeroes B.
template <typename T>
void merge_and_reinit(TinyLM<T>& model, MergeMode mode, std::mt19937_64& rng, double lora_init_std,
                      bool flip_scheme = true);

/// Folds adapters into base weights for export and marks the model consumed.
template <typename T>
void merge_for_export(TinyLM<T>& model);

/// Runs the loop on a model whose adapters are already attached (or on the
/// full model for AdapterKind::Full). `on_row` sees every metrics row.
TrainResult train(const TrainConfig& cfg, TinyLM<float>& model, const KvDataset& data,
                  const std::function<void(const MetricRow&)>& on_row = {});

/// Mean cross-entropy of the value tokens for the given pairs.
double evaluate_loss(TinyLM<float>& model, const KvDataset& data);

/// A base model trained full-rank on random hex sequences, then meant to be
/// frozen: its weights are nontrivial but carry nothing about any dataset.
TinyLM<float> pretrain_base(const ModelConfig& cfg, std::uint64_t seed, std::size_t steps = 500,
                            std::size_t batch = 32, std::size_t seq = 16, double lr = 1e-3);

}  // namespace mora
