// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Exercises libmora through its C header only.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mora/mora.h"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path = fs::temp_directory_path() / ("mora-capi-" + std::to_string(::getpid()));
  TempDir() { fs::create_directories(path); }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const char* name) const { return (path / name).string(); }
};

std::string take(char* s) {
  std::string out = s ? s : "";
  mora_string_free(s);
  return out;
}

const char* kTiny =
    "task.pairs=16\nmodel.dim=32\nmodel.layers=1\nmodel.heads=2\nmodel.ffn_dim=64\n"
    "model.pretrain_steps=5\nadapter.r=4\ntrain.steps=10\ntrain.batch=8\ntrain.eval_every=5\n";

void count_rows(const mora_metric_row* row, void* user) {
  CHECK(row->lr > 0);
  ++*static_cast<int*>(user);
}

}  // namespace

TEST_CASE("status names and last error") {
  CHECK(std::strcmp(mora_status_name(MORA_OK), "ok") == 0);
  mora_config* cfg = nullptr;
  CHECK(mora_config_parse("train.steps=abc\n", &cfg) == MORA_ERR_INVALID_ARGUMENT);
  CHECK(cfg == nullptr);
  CHECK(std::string(mora_last_error()).find("train.steps") != std::string::npos);
  CHECK(mora_config_new(&cfg) == MORA_OK);
  CHECK(std::string(mora_last_error()).empty());
  mora_config_free(cfg);
  CHECK(mora_config_new(nullptr) == MORA_ERR_INVALID_ARGUMENT);
}

TEST_CASE("config set and text") {
  mora_config* cfg = nullptr;
  REQUIRE(mora_config_new(&cfg) == MORA_OK);
  CHECK(mora_config_set(cfg, "adapter.r", "16") == MORA_OK);
  CHECK(mora_config_set(cfg, "no.such.key", "1") == MORA_ERR_INVALID_ARGUMENT);
  CHECK(mora_config_set(cfg, "model.heads", "3") == MORA_ERR_INVALID_ARGUMENT);
  char* text = nullptr;
  REQUIRE(mora_config_text(cfg, &text) == MORA_OK);
  const std::string s = take(text);
  CHECK(s.find("adapter.r=16\n") != std::string::npos);
  CHECK(s.find("model.heads=4\n") != std::string::npos);

  mora_config* back = nullptr;
  REQUIRE(mora_config_parse(s.c_str(), &back) == MORA_OK);
  REQUIRE(mora_config_text(back, &text) == MORA_OK);
  CHECK(take(text) == s);
  mora_config_free(back);
  mora_config_free(cfg);

  CHECK(mora_config_load("/nonexistent/mora.cfg", &cfg) == MORA_ERR_IO);
}

TEST_CASE("train, analyze and export through the C API") {
  TempDir dir;
  mora_config* cfg = nullptr;
  REQUIRE(mora_config_parse(kTiny, &cfg) == MORA_OK);
  REQUIRE(mora_config_set(cfg, "output.dir", (dir / "run").c_str()) == MORA_OK);
  int rows = 0;
  mora_train_summary* sum = nullptr;
  REQUIRE(mora_train(cfg, count_rows, &rows, &sum) == MORA_OK);
  CHECK(rows == 10);
  REQUIRE(mora_train_summary_count(sum) == 1);
  mora_run_info info;
  REQUIRE(mora_train_summary_run(sum, 0, &info) == MORA_OK);
  CHECK(std::string(info.dir) == dir / "run");
  CHECK(mora_train_summary_run(sum, 1, &info) == MORA_ERR_INVALID_ARGUMENT);
  mora_train_summary_free(sum);
  mora_config_free(cfg);

  const std::string ckpt = dir / "run/adapter.ckpt";
  mora_spectrum* spec = nullptr;
  REQUIRE(mora_analyze(ckpt.c_str(), 0.1, &spec) == MORA_OK);
  CHECK(mora_spectrum_count(spec) == 7);
  mora_spectrum_entry e;
  REQUIRE(mora_spectrum_get(spec, 0, &e) == MORA_OK);
  CHECK(std::string(e.family) == "q");
  char* csv = nullptr;
  REQUIRE(mora_spectrum_csv(spec, &csv) == MORA_OK);
  CHECK(take(csv).rfind("layer_family,layer_index,count,top_singular_value\n", 0) == 0);
  mora_spectrum_free(spec);
  CHECK(mora_analyze(ckpt.c_str(), -1, &spec) == MORA_ERR_INVALID_ARGUMENT);

  const std::string base = dir / "run/base.weights", merged = dir / "merged.weights";
  double dev = -1;
  REQUIRE(mora_export(ckpt.c_str(), base.c_str(), merged.c_str(), 3, &dev) == MORA_OK);
  CHECK(dev >= 0);
  CHECK(dev < 1e-5);
  CHECK(mora_export(ckpt.c_str(), merged.c_str(), (dir / "again.weights").c_str(), 3, nullptr) == MORA_ERR_STATE);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK(mora_analyze((dir / "junk.ckpt").c_str(), 0.1, &spec) == MORA_ERR_FORMAT);
  CHECK(std::string(mora_last_error()).find("magic") != std::string::npos);
}

TEST_CASE("verify report, with and without the injected fault") {
  mora_verify_report* rep = nullptr;
  REQUIRE(mora_verify(42, 0, &rep) == MORA_OK);
  CHECK(mora_verify_report_passed(rep) == 1);
  REQUIRE(mora_verify_report_count(rep) == 7);
  mora_suite_info s;
  REQUIRE(mora_verify_report_suite(rep, 0, &s) == MORA_OK);
  CHECK(std::string(s.name) == "losslessness");
  CHECK(s.seed == 42);
  char* text = nullptr;
  REQUIRE(mora_verify_report_text(rep, &text) == MORA_OK);
  const std::string first = take(text);
  mora_verify_report_free(rep);

  REQUIRE(mora_verify(42, 0, &rep) == MORA_OK);
  REQUIRE(mora_verify_report_text(rep, &text) == MORA_OK);
  CHECK(take(text) == first);
  mora_verify_report_free(rep);

  REQUIRE(mora_verify(42, MORA_VERIFY_INJECT_SHARING_FAULT, &rep) == MORA_OK);
  CHECK(mora_verify_report_passed(rep) == 0);
  REQUIRE(mora_verify_report_suite(rep, 0, &s) == MORA_OK);
  CHECK(s.failures > 0);
  CHECK(std::string(s.counterexample).find("x = [") != std::string::npos);
  CHECK(std::string(s.counterexample).find("M = [") != std::string::npos);
  mora_verify_report_free(rep);

  // The fault does not outlive the call.
  REQUIRE(mora_verify(42, 0, &rep) == MORA_OK);
  CHECK(mora_verify_report_passed(rep) == 1);
  mora_verify_report_free(rep);
}
