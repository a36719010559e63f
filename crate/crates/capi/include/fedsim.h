#ifndef FEDSIM_H
#define FEDSIM_H

/* Generated by cbindgen from fedsim-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum FedsimStatus {
  FEDSIM_STATUS_OK = 0,
  FEDSIM_STATUS_NULL_POINTER = 1,
  FEDSIM_STATUS_INVALID_UTF8 = 2,
  FEDSIM_STATUS_CONFIG_ERROR = 3,
  FEDSIM_STATUS_RUN_ERROR = 4,
  FEDSIM_STATUS_OUT_OF_RANGE = 5,
} FedsimStatus;

/**
 * Experiment configuration handle: the config text plus programmatic
 * overrides, validated eagerly on every mutation.
 */
typedef struct FedsimConfig FedsimConfig;

/**
 * A finished run: per-round metrics plus the tail summary.
 */
typedef struct FedsimRun FedsimRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the last error message for this thread as a NUL-terminated UTF-8
 * string. Borrowed; valid until the next failing call on the same thread.
 */
const char *fedsim_last_error_message(void);

/**
 * Crate version as a static string.
 */
const char *fedsim_version(void);

/**
 * Parses a configuration document (flat `key = value` text, UTF-8,
 * NUL-terminated). An empty string yields the documented defaults. On
 * success writes a new handle into `out`.
 *
 * # Safety
 * `text` must point to a NUL-terminated string and `out` to writable
 * pointer storage.
 */
enum FedsimStatus fedsim_config_parse(const char *text, struct FedsimConfig **out);

/**
 * Creates a handle holding the documented default configuration.
 *
 * # Safety
 * `out` must point to writable pointer storage.
 */
enum FedsimStatus fedsim_config_default(struct FedsimConfig **out);

/**
 * Overrides one configuration key (e.g. `fl.seed`, `agg.rule`) with a new
 * value, re-validating the whole document.
 *
 * # Safety
 * All pointers must be valid; `key` and `value` must be NUL-terminated.
 */
enum FedsimStatus fedsim_config_set(struct FedsimConfig *config,
                                    const char *key,
                                    const char *value);

/**
 * Releases a configuration handle. Passing NULL is a no-op.
 *
 * # Safety
 * `config` must be a pointer returned by this library, not yet freed.
 */
void fedsim_config_free(struct FedsimConfig *config);

/**
 * Runs the configured experiment to completion.
 *
 * # Safety
 * `config` must be a live handle; `out` must point to writable storage.
 */
enum FedsimStatus fedsim_run(const struct FedsimConfig *config, struct FedsimRun **out);

/**
 * Runs the benign-only reference: malicious clients are dropped entirely
 * and the remaining clients keep their original partitions.
 *
 * # Safety
 * Same contract as [`fedsim_run`].
 */
enum FedsimStatus fedsim_run_benign_reference(const struct FedsimConfig *config,
                                              struct FedsimRun **out);

/**
 * Number of completed rounds in a run.
 *
 * # Safety
 * `run` must be a live handle.
 */
uintptr_t fedsim_run_rounds(const struct FedsimRun *run);

/**
 * Clean accuracy and attack success rate of one round.
 *
 * # Safety
 * `run` must be a live handle; the out-pointers must be writable.
 */
enum FedsimStatus fedsim_run_metrics(const struct FedsimRun *run,
                                     uintptr_t round,
                                     double *out_clean_acc,
                                     double *out_asr);

/**
 * Mean and sample standard deviation of accuracy and ASR over the summary
 * window (the final rounds of the run).
 *
 * # Safety
 * `run` must be a live handle; the out-pointers must be writable.
 */
enum FedsimStatus fedsim_run_summary(const struct FedsimRun *run,
                                     double *out_clean_acc_mean,
                                     double *out_clean_acc_std,
                                     double *out_asr_mean,
                                     double *out_asr_std);

/**
 * Releases a run handle. Passing NULL is a no-op.
 *
 * # Safety
 * `run` must be a pointer returned by this library, not yet freed.
 */
void fedsim_run_free(struct FedsimRun *run);

/**
 * Writes the documented default configuration into a caller buffer as
 * NUL-terminated text and returns the number of bytes required (including
 * the NUL). When `buffer` is NULL or too small, nothing is written; call
 * with NULL to size the buffer first.
 *
 * # Safety
 * When non-NULL, `buffer` must have space for `capacity` bytes.
 */
uintptr_t fedsim_default_config_text(char *buffer, uintptr_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDSIM_H */
