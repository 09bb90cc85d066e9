/* Copyright 2026 The vlmdiff Authors
 * SPDX-License-Identifier: Apache-2.0 */

#ifndef VLMDIFF_VLMDIFF_H_
#define VLMDIFF_VLMDIFF_H_

#include <stddef.h>
#include <stdint.h>

#if defined(VLMDIFF_BUILDING)
#define VLMDIFF_API __attribute__((visibility("default")))
#else
#define VLMDIFF_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vlmdiff_status {
  VLMDIFF_OK = 0,
  VLMDIFF_ERR_USER = 1,             /* invalid argument or configuration */
  VLMDIFF_ERR_IO = 2,               /* file could not be read or written */
  VLMDIFF_ERR_MISSING_ARTIFACT = 3, /* a prior stage has not run */
  VLMDIFF_ERR_PROVIDER = 4,         /* caption provider failed; retryable */
  VLMDIFF_ERR_NUMERIC = 5,          /* non-finite values during training */
  VLMDIFF_ERR_INTERNAL = 6
} vlmdiff_status;

typedef struct vlmdiff_run vlmdiff_run;

/* Message of the last failed call on this thread; empty after success. */
VLMDIFF_API const char* vlmdiff_last_error(void);
VLMDIFF_API const char* vlmdiff_version(void);
VLMDIFF_API const char* vlmdiff_status_name(vlmdiff_status status);

/* Loads and validates a JSON config. `config_path` may be NULL for all defaults.
 * `overrides` holds `n_overrides` strings of the form "section.key=value". */
VLMDIFF_API vlmdiff_status vlmdiff_run_open(const char* config_path, const char* const* overrides,
                                            size_t n_overrides, vlmdiff_run** out);
VLMDIFF_API void vlmdiff_run_close(vlmdiff_run* run);

/* Receives one progress line per call; `user` is passed through. */
typedef void (*vlmdiff_message_fn)(const char* line, void* user);
VLMDIFF_API void vlmdiff_run_set_message_callback(vlmdiff_run* run, vlmdiff_message_fn fn, void* user);

/* Runs one stage by name: synth, caption, train_ae, train_diff, infer, eval, report, or "all". */
VLMDIFF_API vlmdiff_status vlmdiff_run_stage(vlmdiff_run* run, const char* stage);

/* Copies a NUL-terminated string into `buf` (if `cap` > 0) and stores the full
 * length (excluding NUL) in `*needed`. The string is truncated when `cap` is too small. */
VLMDIFF_API vlmdiff_status vlmdiff_run_config_json(const vlmdiff_run* run, char* buf, size_t cap, size_t* needed);
VLMDIFF_API vlmdiff_status vlmdiff_run_output_dir(const vlmdiff_run* run, char* buf, size_t cap, size_t* needed);
/* Contents of the evaluation report produced by the eval stage. */
VLMDIFF_API vlmdiff_status vlmdiff_run_report_text(const vlmdiff_run* run, char* buf, size_t cap, size_t* needed);

/* Metrics on caller-owned arrays. */
VLMDIFF_API vlmdiff_status vlmdiff_auroc(const double* scores, const uint8_t* labels, size_t n, double* out);
/* `maps` and `masks` hold `n_images` row-major height x width arrays back to back. */
VLMDIFF_API vlmdiff_status vlmdiff_pro(const float* maps, const uint8_t* masks, size_t n_images, int height, int width,
                                       double fpr_limit, int n_thresholds, double* out);

/* Per-location 1 - cosine between two [grid_h, grid_w, channels] feature grids, bilinearly
 * resized to out_h x out_w (features first) and optionally Gaussian-smoothed with `sigma` px. */
VLMDIFF_API vlmdiff_status vlmdiff_anomaly_map(const float* features, const float* features_rec, int grid_h,
                                               int grid_w, int channels, int out_h, int out_w, double sigma,
                                               float* out_scores, float* out_image_score);

#ifdef __cplusplus
}
#endif

#endif /* VLMDIFF_VLMDIFF_H_ */
