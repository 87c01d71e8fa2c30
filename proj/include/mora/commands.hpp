// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// The four user-facing commands over on-disk artifacts. The C API and the
// acceptance harness both call these.

#pragma once

#include "mora/io.hpp"

#include <functional>
#include <string>

namespace mora {

/// Pretrained frozen base for a config: full-rank training on random hex
/// strings, seeded by base_seed().
TinyLM<float> base_model(const ExperimentConfig& cfg);

/// Attaches the configured adapter to `model` (seeded by cfg.seed) and trains
/// it at `lr` on cfg.dataset().
TrainResult train_from_base(const ExperimentConfig& cfg, double lr, TinyLM<float>& model,
                            const std::function<void(const MetricRow&)>& on_row = {});

struct TrainOutcome {
  double lr = 0;
  std::string dir;
  TrainResult result;
};

struct TrainRun {
  std::vector<TrainOutcome> runs;  // one per learning rate, in config order
  std::size_t best = 0;            // fewest steps to target, then lowest final loss
};

/// Runs every learning rate in the config under cfg.out_dir, which must not
/// be locked by another run. Each run directory receives metrics.csv,
/// adapter.ckpt and base.weights (the frozen weights including any merged
/// increments); the top level receives config.txt and, for several learning
/// rates, sweep.csv with one lr-<value> subdirectory per rate.
TrainRun run_train(const ExperimentConfig& cfg, const std::function<void(double, const MetricRow&)>& on_row = {});

SpectrumReport run_analyze(const std::string& checkpoint_path, double threshold);

struct ExportOutcome {
  double max_relative_deviation = 0;
  std::uint64_t checkpoint_digest = 0;
};

/// Folds the checkpoint's adapters into the base weights and writes them to
/// `out_path`. Logits of `inputs` random sequences before and after folding
/// must agree within `tolerance` (max relative deviation), otherwise nothing
/// is written and Error(Verify) is thrown. Weights already carrying this
/// checkpoint's digest are rejected. When folding changes no weight the
/// output repeats the base file byte for byte.
ExportOutcome run_export(const std::string& checkpoint_path, const std::string& base_path, const std::string& out_path,
                         std::uint64_t seed, double tolerance = 1e-5, std::size_t inputs = 100);

/// Exclusive ownership of a run directory through a lock file.
class RunLock {
 public:
  explicit RunLock(const std::string& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
};

}  // namespace mora
