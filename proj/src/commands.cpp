// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <sstream>

namespace fs = std::filesystem;

namespace mora {

RunLock::RunLock(const std::string& dir) : path_((fs::path(dir) / ".lock").string()) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Error::Kind::Io, "cannot create run directory '" + dir + "': " + ec.message());
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    const std::string held = path_;
    path_.clear();
    throw Error(Error::Kind::State, "run directory '" + dir + "' is locked by another run (" + held + ")");
  }
  std::fclose(f);
}

RunLock::~RunLock() {
  if (path_.empty()) return;
  std::error_code ec;
  fs::remove(path_, ec);
}

TinyLM<float> base_model(const ExperimentConfig& cfg) {
  return pretrain_base(cfg.model, cfg.base_seed(), cfg.pretrain_steps);
}

TrainResult train_from_base(const ExperimentConfig& cfg, double lr, TinyLM<float>& model,
                            const std::function<void(const MetricRow&)>& on_row) {
  const TrainConfig tc = cfg.train_config(lr);
  std::mt19937_64 rng(cfg.seed);
  attach_adapters(model, tc, rng);
  return train(tc, model, cfg.dataset(), on_row);
}

namespace {

std::string lr_label(double lr) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "lr-%g", lr);
  return buf;
}

void write_run(const std::string& dir, const TinyLM<float>& model, const TrainResult& result) {
  std::ostringstream metrics;
  write_metrics_csv(metrics, result.rows);
  write_file((fs::path(dir) / "metrics.csv").string(), metrics.str());
  write_file((fs::path(dir) / "adapter.ckpt").string(), encode_checkpoint(model));
  write_file((fs::path(dir) / "base.weights").string(), encode_weights(model, 0));
}

}  // namespace

TrainRun run_train(const ExperimentConfig& cfg, const std::function<void(double, const MetricRow&)>& on_row) {
  for (double lr : cfg.lrs) cfg.train_config(lr).validate();
  RunLock lock(cfg.out_dir);
  write_file((fs::path(cfg.out_dir) / "config.txt").string(), cfg.to_text());

  const TinyLM<float> base = base_model(cfg);
  TrainRun run;
  for (double lr : cfg.lrs) {
    TrainOutcome outcome;
    outcome.lr = lr;
    outcome.dir = cfg.lrs.size() == 1 ? cfg.out_dir : (fs::path(cfg.out_dir) / lr_label(lr)).string();
    fs::create_directories(outcome.dir);
    TinyLM<float> model = base;
    outcome.result = train_from_base(cfg, lr, model, [&](const MetricRow& row) {
      if (on_row) on_row(lr, row);
    });
    write_run(outcome.dir, model, outcome.result);
    run.runs.push_back(std::move(outcome));
  }

  auto key = [&](const TrainOutcome& o) {
    const double steps = o.result.steps_to_target ? static_cast<double>(*o.result.steps_to_target)
                                                  : std::numeric_limits<double>::infinity();
    return std::pair{steps, o.result.final_loss};
  };
  for (std::size_t i = 1; i < run.runs.size(); ++i)
    if (key(run.runs[i]) < key(run.runs[run.best])) run.best = i;

  if (run.runs.size() > 1) {
    std::ostringstream sweep;
    sweep << "lr,steps_to_target,final_loss,final_accuracy,dir\n";
    char buf[160];
    for (const auto& o : run.runs) {
      const std::string steps = o.result.steps_to_target ? std::to_string(*o.result.steps_to_target) : "";
      std::snprintf(buf, sizeof buf, "%.9g,%s,%.9g,%.6f,%s\n", o.lr, steps.c_str(), o.result.final_loss,
                    o.result.final_accuracy, lr_label(o.lr).c_str());
      sweep << buf;
    }
    write_file((fs::path(cfg.out_dir) / "sweep.csv").string(), sweep.str());
  }
  return run;
}

SpectrumReport run_analyze(const std::string& checkpoint_path, double threshold) {
  return spectrum_report(decode_checkpoint(read_file(checkpoint_path)), threshold);
}

ExportOutcome run_export(const std::string& checkpoint_path, const std::string& base_path, const std::string& out_path,
                         std::uint64_t seed, double tolerance, std::size_t inputs) {
  const std::string ckpt_bytes = read_file(checkpoint_path);
  const auto records = decode_checkpoint(ckpt_bytes);
  const std::string base_bytes = read_file(base_path);
  WeightsFile base = decode_weights(base_bytes);
  ExportOutcome outcome;
  outcome.checkpoint_digest = fnv1a64(ckpt_bytes);
  if (base.consumed_digest == outcome.checkpoint_digest) {
    throw Error(Error::Kind::State, "export: '" + base_path + "' already contains the merged adapters of '" +
                                        checkpoint_path + "' (checkpoint consumed)");
  }
  TinyLM<float>& model = base.model;
  apply_checkpoint(model, records);

  const std::size_t seq = 16;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> token(0, static_cast<int>(model.config().vocab) - 1);
  std::vector<int> tokens(inputs * seq);
  for (auto& t : tokens) t = token(rng);
  const Matrix<float> before = model.logits(tokens, inputs, seq);
  merge_for_export(model);
  const Matrix<float> after = model.logits(tokens, inputs, seq);
  outcome.max_relative_deviation = max_relative_deviation(after, before);
  if (!(outcome.max_relative_deviation < tolerance)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "export: merged forward deviates by %.3e (limit %.1e); nothing written",
                  outcome.max_relative_deviation, tolerance);
    throw Error(Error::Kind::Verify, buf);
  }
  // A merge that changes no weight leaves the base file untouched, so a fresh
  // adapter exports to the exact input bytes.
  std::string merged = encode_weights(model, base.consumed_digest);
  if (merged != base_bytes) merged = encode_weights(model, outcome.checkpoint_digest);
  write_file(out_path, merged);
  return outcome;
}

}  // namespace mora
