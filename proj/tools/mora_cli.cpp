// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// mora: command-line front end over the C API.
//
//   mora verify  [--seed N]
//   mora train   --config FILE [--seed N] [--out DIR]
//   mora analyze CHECKPOINT [--threshold T] [--out FILE]
//   mora export  CHECKPOINT BASE --out FILE [--seed N]
//
// Exit status: 0 success, 1 a check or command failed, 2 usage error.

#include "mora/mora.h"

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <string>

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

int report(mora_status st, const char* what) {
  std::fprintf(stderr, "mora %s: %s: %s\n", what, mora_status_name(st), mora_last_error());
  return st == MORA_ERR_INVALID_ARGUMENT ? kUsage : kFailed;
}

struct Owned {
  char* s = nullptr;
  ~Owned() { mora_string_free(s); }
};

int cmd_verify(std::uint64_t seed, bool inject) {
  mora_verify_report* rep = nullptr;
  if (auto st = mora_verify(seed, inject ? MORA_VERIFY_INJECT_SHARING_FAULT : 0u, &rep); st != MORA_OK)
    return report(st, "verify");
  Owned text;
  const mora_status st = mora_verify_report_text(rep, &text.s);
  const bool passed = mora_verify_report_passed(rep);
  mora_verify_report_free(rep);
  if (st != MORA_OK) return report(st, "verify");
  std::fputs(text.s, stdout);
  return passed ? kOk : kFailed;
}

void print_row(const mora_metric_row* row, void*) {
  if (!row->has_eval && !row->merge) return;
  std::printf("step %6zu  lr %.3e  loss %.5f", row->step, row->lr, row->train_loss);
  if (row->has_eval) std::printf("  acc %.4f", row->eval_accuracy);
  if (row->merge) std::printf("  merged");
  std::printf("\n");
  std::fflush(stdout);
}

int cmd_train(const std::string& config_path, const CLI::Option* seed_opt, std::uint64_t seed,
              const std::string& out) {
  mora_config* cfg = nullptr;
  if (auto st = mora_config_load(config_path.c_str(), &cfg); st != MORA_OK) return report(st, "train");
  mora_status st = MORA_OK;
  if (seed_opt->count() > 0) st = mora_config_set(cfg, "seed", std::to_string(seed).c_str());
  if (st == MORA_OK && !out.empty()) st = mora_config_set(cfg, "output.dir", out.c_str());
  mora_train_summary* sum = nullptr;
  if (st == MORA_OK) st = mora_train(cfg, print_row, nullptr, &sum);
  mora_config_free(cfg);
  if (st != MORA_OK) return report(st, "train");

  const size_t n = mora_train_summary_count(sum);
  for (size_t i = 0; i < n; ++i) {
    mora_run_info info;
    mora_train_summary_run(sum, i, &info);
    char steps[32] = "not reached";
    if (info.steps_to_target >= 0) std::snprintf(steps, sizeof steps, "%" PRId64, info.steps_to_target);
    std::printf("%s lr %.3e  steps_to_target %s  final_loss %.5f  final_accuracy %.4f  -> %s\n",
                i == mora_train_summary_best(sum) && n > 1 ? "*" : " ", info.lr, steps, info.final_loss,
                info.final_accuracy, info.dir);
  }
  mora_train_summary_free(sum);
  return kOk;
}

int cmd_analyze(const std::string& ckpt, double threshold, const std::string& out) {
  mora_spectrum* spec = nullptr;
  if (auto st = mora_analyze(ckpt.c_str(), threshold, &spec); st != MORA_OK) return report(st, "analyze");
  Owned csv;
  const mora_status st = mora_spectrum_csv(spec, &csv.s);
  mora_spectrum_free(spec);
  if (st != MORA_OK) return report(st, "analyze");
  if (out.empty()) {
    std::fputs(csv.s, stdout);
    return kOk;
  }
  std::ofstream f(out, std::ios::binary);
  if (!(f << csv.s)) {
    std::fprintf(stderr, "mora analyze: cannot write '%s'\n", out.c_str());
    return kFailed;
  }
  return kOk;
}

int cmd_export(const std::string& ckpt, const std::string& base, const std::string& out, std::uint64_t seed) {
  double dev = -1;
  const mora_status st = mora_export(ckpt.c_str(), base.c_str(), out.c_str(), seed, &dev);
  if (st != MORA_OK) return report(st, "export");
  std::printf("max relative deviation %.3e (limit 1e-05)\nwrote %s\n", dev, out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoRA and LoRA adapters on a tiny decoder: verify, train, analyze, export", "mora"};
  app.require_subcommand(1);
  app.set_version_flag("--version", mora_version());

  std::uint64_t seed = 42;
  std::string config, out, ckpt, base;
  double threshold = 0.1;
  bool inject = false;

  auto* verify = app.add_subcommand("verify", "Run every property suite in 64-bit");
  verify->add_option("--seed", seed, "Base seed for the suites")->capture_default_str();
  verify->add_flag("--inject-sharing-fault", inject)->group("");

  auto* train = app.add_subcommand("train", "Train one experiment config");
  train->add_option("--config", config, "Experiment config file")->required()->check(CLI::ExistingFile);
  auto* train_seed = train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--out", out, "Override output.dir");

  auto* analyze = app.add_subcommand("analyze", "Singular-value counts of every adapted layer");
  analyze->add_option("checkpoint", ckpt, "Adapter checkpoint")->required();
  analyze->add_option("--threshold", threshold, "Count singular values above this")->capture_default_str();
  analyze->add_option("--out", out, "Write the CSV here instead of stdout");

  auto* exp = app.add_subcommand("export", "Fold adapters into base weights");
  exp->add_option("checkpoint", ckpt, "Adapter checkpoint")->required();
  exp->add_option("base", base, "Base weights")->required();
  exp->add_option("--out", out, "Merged weights file")->required();
  exp->add_option("--seed", seed, "Seed for the equivalence inputs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (*verify) return cmd_verify(seed, inject);
  if (*train) return cmd_train(config, train_seed, seed, out);
  if (*analyze) return cmd_analyze(ckpt, threshold, out);
  return cmd_export(ckpt, base, out, seed);
}
