/* Copyright 2026 The MoRA Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to libmora. Every fallible call returns a mora_status; on
 * failure mora_last_error() describes the problem for the calling thread.
 * Handles are opaque and owned by the caller until passed to their _free
 * function. Strings returned through char** are released with
 * mora_string_free.
 */
#ifndef MORA_MORA_H_
#define MORA_MORA_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MORA_API __declspec(dllexport)
#else
#define MORA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mora_status {
  MORA_OK = 0,
  MORA_ERR_INVALID_ARGUMENT = 1,
  MORA_ERR_SHAPE = 2,
  MORA_ERR_NUMERIC = 3,
  MORA_ERR_FORMAT = 4,
  MORA_ERR_IO = 5,
  MORA_ERR_STATE = 6,
  MORA_ERR_VERIFY = 7,
  MORA_ERR_INTERNAL = 8
} mora_status;

typedef struct mora_config mora_config;
typedef struct mora_verify_report mora_verify_report;
typedef struct mora_train_summary mora_train_summary;
typedef struct mora_spectrum mora_spectrum;

MORA_API const char* mora_version(void);
MORA_API const char* mora_status_name(mora_status status);
/* Message of the last failed call on this thread; "" if none. */
MORA_API const char* mora_last_error(void);
MORA_API void mora_string_free(char* s);

/* ---- experiment config ---- */

MORA_API mora_status mora_config_new(mora_config** out);
MORA_API mora_status mora_config_load(const char* path, mora_config** out);
MORA_API mora_status mora_config_parse(const char* text, mora_config** out);
/* Overrides one key (same names and syntax as the config file). */
MORA_API mora_status mora_config_set(mora_config* cfg, const char* key, const char* value);
MORA_API mora_status mora_config_text(const mora_config* cfg, char** out);
MORA_API void mora_config_free(mora_config* cfg);

/* ---- verify ---- */

#define MORA_VERIFY_INJECT_SHARING_FAULT 0x1u

typedef struct mora_suite_info {
  const char* name; /* valid while the report lives */
  uint64_t seed;
  size_t cases;
  size_t failures;
  double worst;
  double tolerance;
  const char* counterexample; /* "" when the suite passed */
} mora_suite_info;

/* Returns MORA_OK whenever the suites ran, even if some failed; inspect the
 * report. */
MORA_API mora_status mora_verify(uint64_t seed, unsigned flags, mora_verify_report** out);
MORA_API size_t mora_verify_report_count(const mora_verify_report* report);
MORA_API int mora_verify_report_passed(const mora_verify_report* report);
MORA_API mora_status mora_verify_report_suite(const mora_verify_report* report, size_t index, mora_suite_info* out);
MORA_API mora_status mora_verify_report_text(const mora_verify_report* report, char** out);
MORA_API void mora_verify_report_free(mora_verify_report* report);

/* ---- train ---- */

typedef struct mora_metric_row {
  size_t step;
  double lr;
  double train_loss;
  int has_eval;
  double eval_accuracy;
  int merge;
} mora_metric_row;

typedef void (*mora_progress_fn)(const mora_metric_row* row, void* user);

typedef struct mora_run_info {
  double lr;
  int64_t steps_to_target; /* -1 when the target was never reached */
  double final_loss;
  double final_accuracy;
  size_t merges;
  const char* dir; /* valid while the summary lives */
} mora_run_info;

MORA_API mora_status mora_train(const mora_config* cfg, mora_progress_fn progress, void* user, mora_train_summary** out);
MORA_API size_t mora_train_summary_count(const mora_train_summary* summary);
MORA_API size_t mora_train_summary_best(const mora_train_summary* summary);
MORA_API mora_status mora_train_summary_run(const mora_train_summary* summary, size_t index, mora_run_info* out);
MORA_API void mora_train_summary_free(mora_train_summary* summary);

/* ---- analyze ---- */

typedef struct mora_spectrum_entry {
  size_t layer;
  const char* family;
  size_t count;
  double top_singular_value;
  size_t rows;
  size_t cols;
  const char* error; /* "" unless the SVD failed for this layer */
} mora_spectrum_entry;

MORA_API mora_status mora_analyze(const char* checkpoint_path, double threshold, mora_spectrum** out);
MORA_API size_t mora_spectrum_count(const mora_spectrum* spectrum);
MORA_API mora_status mora_spectrum_get(const mora_spectrum* spectrum, size_t index, mora_spectrum_entry* out);
MORA_API mora_status mora_spectrum_csv(const mora_spectrum* spectrum, char** out);
MORA_API void mora_spectrum_free(mora_spectrum* spectrum);

/* ---- export ---- */

/* Fails with MORA_ERR_VERIFY, writing nothing, when merged logits deviate
 * from the adapted model by 1e-5 or more. `max_deviation` may be NULL. */
MORA_API mora_status mora_export(const char* checkpoint_path, const char* base_path, const char* out_path,
                                 uint64_t seed, double* max_deviation);

#ifdef __cplusplus
}
#endif

#endif /* MORA_MORA_H_ */
