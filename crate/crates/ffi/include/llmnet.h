#ifndef LLMNET_H
#define LLMNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LlmnetStatus {
  LLMNET_STATUS_OK = 0,
  LLMNET_STATUS_NULL_POINTER = 1,
  LLMNET_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad config or argument; nothing was run.
   */
  LLMNET_STATUS_CONFIG_ERROR = 3,
  /**
   * The experiment started and failed.
   */
  LLMNET_STATUS_RUNTIME_ERROR = 4,
  LLMNET_STATUS_OUT_OF_RANGE = 5,
  LLMNET_STATUS_PANIC = 6,
} LlmnetStatus;

/**
 * Experiment configuration.
 */
typedef struct LlmnetConfig LlmnetConfig;

/**
 * Result of a finished run.
 */
typedef struct LlmnetRun LlmnetRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful one. The pointer stays valid until the next call into this
 * library on the same thread.
 */
const char *llmnet_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void llmnet_string_free(char *s);

/**
 * Default config for `kind` (e.g. `"prop1"`, `"reconfig-bench"`).
 *
 * # Safety
 * `kind` must be a NUL-terminated string; `out` must be writable.
 */
enum LlmnetStatus llmnet_config_default(const char *kind, struct LlmnetConfig **out);

/**
 * Parses a TOML config. Missing keys take the defaults of its `kind`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum LlmnetStatus llmnet_config_from_toml(const char *text, struct LlmnetConfig **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LlmnetStatus llmnet_config_load(const char *path, struct LlmnetConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, not yet freed.
 */
void llmnet_config_free(struct LlmnetConfig *cfg);

/**
 * # Safety
 * `cfg` must be a live config handle.
 */
enum LlmnetStatus llmnet_config_set_seed(struct LlmnetConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be a live config handle and `dir` a NUL-terminated string.
 */
enum LlmnetStatus llmnet_config_set_out(struct LlmnetConfig *cfg, const char *dir);

/**
 * `jobs = 0` means all cores.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum LlmnetStatus llmnet_config_set_jobs(struct LlmnetConfig *cfg, size_t jobs);

/**
 * # Safety
 * `cfg` must be a live config handle.
 */
enum LlmnetStatus llmnet_config_validate(const struct LlmnetConfig *cfg);

/**
 * Effective config as TOML, or null on a null handle.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
char *llmnet_config_to_toml(const struct LlmnetConfig *cfg);

/**
 * Validates and runs the experiment, writing artifacts to the config's
 * output directory.
 *
 * # Safety
 * `cfg` must be a live config handle; `out` must be writable.
 */
enum LlmnetStatus llmnet_run(const struct LlmnetConfig *cfg, struct LlmnetRun **out);

/**
 * # Safety
 * `run` must be null or a handle from [`llmnet_run`], not yet freed.
 */
void llmnet_run_free(struct LlmnetRun *run);

/**
 * # Safety
 * `run` must be a live run handle.
 */
double llmnet_run_wall_time(const struct LlmnetRun *run);

/**
 * # Safety
 * `run` must be a live run handle.
 */
size_t llmnet_run_artifact_count(const struct LlmnetRun *run);

/**
 * Path of artifact `idx` and its SHA-256 as hex. Either output may be null.
 *
 * # Safety
 * `run` must be a live run handle; non-null outputs must be writable.
 */
enum LlmnetStatus llmnet_run_artifact(const struct LlmnetRun *run,
                                      size_t idx,
                                      char **path,
                                      char **sha256);

/**
 * Headline numbers of the run as a JSON object.
 *
 * # Safety
 * `run` must be a live run handle.
 */
char *llmnet_run_summary_json(const struct LlmnetRun *run);

/**
 * Writes plot tables for a finished run directory.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string; `n_written` may be null.
 */
enum LlmnetStatus llmnet_emit_plotdata(const char *run_dir, size_t *n_written);

/**
 * `δ₁` for `n` agents with per-class misclassification rates `p_t`, `p_h`.
 *
 * # Safety
 * `out` must be writable.
 */
enum LlmnetStatus llmnet_delta1_bound(size_t n, double p_t, double p_h, double *out);

/**
 * 95% Wilson score interval for `successes` out of `trials`.
 *
 * # Safety
 * `lo` and `hi` must be writable.
 */
enum LlmnetStatus llmnet_wilson_interval(size_t successes, size_t trials, double *lo, double *hi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LLMNET_H */
