// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/mora.h"

#include "mora/commands.hpp"
#include "mora/verify.hpp"

#include <cstring>
#include <filesystem>
#include <new>
#include <sstream>

struct mora_config {
  mora::ExperimentConfig cfg;
};

struct mora_verify_report {
  std::vector<mora::SuiteResult> suites;
};

struct mora_train_summary {
  mora::TrainRun run;
};

struct mora_spectrum {
  mora::SpectrumReport report;
  std::vector<std::string> families;
};

namespace {

thread_local std::string g_last_error;

mora_status fail(mora_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

mora_status status_of(mora::Error::Kind kind) {
  using K = mora::Error::Kind;
  switch (kind) {
    case K::InvalidArgument: return MORA_ERR_INVALID_ARGUMENT;
    case K::Shape: return MORA_ERR_SHAPE;
    case K::Numeric: return MORA_ERR_NUMERIC;
    case K::Format: return MORA_ERR_FORMAT;
    case K::Io: return MORA_ERR_IO;
    case K::State: return MORA_ERR_STATE;
    case K::Verify: return MORA_ERR_VERIFY;
  }
  return MORA_ERR_INTERNAL;
}

template <typename F>
mora_status guarded(F&& body) {
  try {
    g_last_error.clear();
    body();
    return MORA_OK;
  } catch (const mora::Error& e) {
    return fail(status_of(e.kind()), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(MORA_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(MORA_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(MORA_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(MORA_ERR_INTERNAL, "unknown exception");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(const void* p, const char* what) {
  if (!p) throw mora::Error(mora::Error::Kind::InvalidArgument, std::string(what) + " must not be null");
}

}  // namespace

extern "C" {

const char* mora_version(void) { return "0.1.0"; }

const char* mora_status_name(mora_status status) {
  switch (status) {
    case MORA_OK: return "ok";
    case MORA_ERR_INVALID_ARGUMENT: return "invalid argument";
    case MORA_ERR_SHAPE: return "shape mismatch";
    case MORA_ERR_NUMERIC: return "numeric failure";
    case MORA_ERR_FORMAT: return "format error";
    case MORA_ERR_IO: return "i/o error";
    case MORA_ERR_STATE: return "state conflict";
    case MORA_ERR_VERIFY: return "verification failed";
    case MORA_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* mora_last_error(void) { return g_last_error.c_str(); }

void mora_string_free(char* s) { std::free(s); }

mora_status mora_config_new(mora_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new mora_config{};
  });
}

mora_status mora_config_load(const char* path, mora_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    const std::string text = mora::read_file(path);
    try {
      *out = new mora_config{mora::ExperimentConfig::parse(text)};
    } catch (const mora::Error& e) {
      throw mora::Error(e.kind(), std::string(path) + ": " + e.what());
    }
  });
}

mora_status mora_config_parse(const char* text, mora_config** out) {
  return guarded([&] {
    require(text, "text");
    require(out, "out");
    *out = new mora_config{mora::ExperimentConfig::parse(text)};
  });
}

mora_status mora_config_set(mora_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "config");
    require(key, "key");
    require(value, "value");
    const std::string prefix = std::string(key) + "=";
    std::istringstream in(cfg->cfg.to_text());
    std::string line, text;
    bool found = false;
    while (std::getline(in, line)) {
      if (line.rfind(prefix, 0) == 0) {
        line = prefix + value;
        found = true;
      }
      text += line + '\n';
    }
    if (!found) throw mora::Error(mora::Error::Kind::InvalidArgument, std::string("unknown config key '") + key + "'");
    cfg->cfg = mora::ExperimentConfig::parse(text);
  });
}

mora_status mora_config_text(const mora_config* cfg, char** out) {
  return guarded([&] {
    require(cfg, "config");
    require(out, "out");
    *out = dup_string(cfg->cfg.to_text());
  });
}

void mora_config_free(mora_config* cfg) { delete cfg; }

mora_status mora_verify(uint64_t seed, unsigned flags, mora_verify_report** out) {
  return guarded([&] {
    require(out, "out");
    mora::VerifyOptions opt;
    opt.seed = seed;
    opt.inject_sharing_fault = (flags & MORA_VERIFY_INJECT_SHARING_FAULT) != 0;
    *out = new mora_verify_report{mora::verify_all(opt)};
  });
}

size_t mora_verify_report_count(const mora_verify_report* report) { return report ? report->suites.size() : 0; }

int mora_verify_report_passed(const mora_verify_report* report) {
  if (!report) return 0;
  for (const auto& s : report->suites)
    if (!s.passed()) return 0;
  return 1;
}

mora_status mora_verify_report_suite(const mora_verify_report* report, size_t index, mora_suite_info* out) {
  return guarded([&] {
    require(report, "report");
    require(out, "out");
    if (index >= report->suites.size()) throw mora::Error(mora::Error::Kind::InvalidArgument, "suite index out of range");
    const auto& s = report->suites[index];
    *out = {s.name.c_str(), s.seed, s.cases, s.failures, s.worst, s.tolerance, s.counterexample.c_str()};
  });
}

mora_status mora_verify_report_text(const mora_verify_report* report, char** out) {
  return guarded([&] {
    require(report, "report");
    require(out, "out");
    *out = dup_string(mora::format_verify_report(report->suites));
  });
}

void mora_verify_report_free(mora_verify_report* report) { delete report; }

mora_status mora_train(const mora_config* cfg, mora_progress_fn progress, void* user, mora_train_summary** out) {
  return guarded([&] {
    require(cfg, "config");
    require(out, "out");
    auto on_row = [&](double, const mora::MetricRow& row) {
      if (!progress) return;
      const mora_metric_row r{row.step, row.lr, row.train_loss, row.eval_accuracy.has_value(),
                              row.eval_accuracy.value_or(0.0), row.merge};
      progress(&r, user);
    };
    *out = new mora_train_summary{mora::run_train(cfg->cfg, on_row)};
  });
}

size_t mora_train_summary_count(const mora_train_summary* summary) { return summary ? summary->run.runs.size() : 0; }

size_t mora_train_summary_best(const mora_train_summary* summary) { return summary ? summary->run.best : 0; }

mora_status mora_train_summary_run(const mora_train_summary* summary, size_t index, mora_run_info* out) {
  return guarded([&] {
    require(summary, "summary");
    require(out, "out");
    if (index >= summary->run.runs.size()) throw mora::Error(mora::Error::Kind::InvalidArgument, "run index out of range");
    const auto& o = summary->run.runs[index];
    *out = {o.lr,
            o.result.steps_to_target ? static_cast<int64_t>(*o.result.steps_to_target) : -1,
            o.result.final_loss,
            o.result.final_accuracy,
            o.result.merges,
            o.dir.c_str()};
  });
}

void mora_train_summary_free(mora_train_summary* summary) { delete summary; }

mora_status mora_analyze(const char* checkpoint_path, double threshold, mora_spectrum** out) {
  return guarded([&] {
    require(checkpoint_path, "checkpoint path");
    require(out, "out");
    if (!(threshold >= 0)) throw mora::Error(mora::Error::Kind::InvalidArgument, "threshold must be non-negative");
    auto s = std::make_unique<mora_spectrum>();
    s->report = mora::run_analyze(checkpoint_path, threshold);
    for (const auto& e : s->report.entries) s->families.emplace_back(mora::family_name(e.family));
    *out = s.release();
  });
}

size_t mora_spectrum_count(const mora_spectrum* spectrum) { return spectrum ? spectrum->report.entries.size() : 0; }

mora_status mora_spectrum_get(const mora_spectrum* spectrum, size_t index, mora_spectrum_entry* out) {
  return guarded([&] {
    require(spectrum, "spectrum");
    require(out, "out");
    if (index >= spectrum->report.entries.size())
      throw mora::Error(mora::Error::Kind::InvalidArgument, "spectrum index out of range");
    const auto& e = spectrum->report.entries[index];
    *out = {e.layer, spectrum->families[index].c_str(), e.count, e.top_singular_value, e.rows, e.cols, e.error.c_str()};
  });
}

mora_status mora_spectrum_csv(const mora_spectrum* spectrum, char** out) {
  return guarded([&] {
    require(spectrum, "spectrum");
    require(out, "out");
    std::ostringstream os;
    mora::write_spectrum_csv(os, spectrum->report);
    *out = dup_string(os.str());
  });
}

void mora_spectrum_free(mora_spectrum* spectrum) { delete spectrum; }

mora_status mora_export(const char* checkpoint_path, const char* base_path, const char* out_path, uint64_t seed,
                        double* max_deviation) {
  return guarded([&] {
    require(checkpoint_path, "checkpoint path");
    require(base_path, "base path");
    require(out_path, "output path");
    try {
      const auto outcome = mora::run_export(checkpoint_path, base_path, out_path, seed);
      if (max_deviation) *max_deviation = outcome.max_relative_deviation;
    } catch (const mora::Error&) {
      if (max_deviation) *max_deviation = -1;
      throw;
    }
  });
}

}  // extern "C"
