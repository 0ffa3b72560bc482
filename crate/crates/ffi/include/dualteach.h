#ifndef DUALTEACH_H
#define DUALTEACH_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DtStatus {
  DT_STATUS_OK = 0,
  DT_STATUS_NULL_POINTER = 1,
  DT_STATUS_INVALID_ARGUMENT = 2,
  DT_STATUS_CONFIG = 3,
  DT_STATUS_IO = 4,
  DT_STATUS_PARSE = 5,
  DT_STATUS_SHAPE = 6,
  DT_STATUS_NON_FINITE = 7,
  DT_STATUS_EMPTY = 8,
  DT_STATUS_CHECKPOINT = 9,
  DT_STATUS_BUFFER_TOO_SMALL = 10,
  DT_STATUS_PANIC = 11,
} DtStatus;

/**
 * MSE divisor selector for [`dt_evaluate`].
 */
typedef enum DtMseDivisor {
  DT_MSE_DIVISOR_CLASSES = 0,
  DT_MSE_DIVISOR_ONE = 1,
} DtMseDivisor;

/**
 * A validated pipeline configuration.
 */
typedef struct DtConfig DtConfig;

/**
 * A trained model with the vocabulary and class set of its run directory.
 */
typedef struct DtModel DtModel;

/**
 * Aggregate metrics written by [`dt_evaluate`] and [`dt_run_pipeline`].
 */
typedef struct DtMetrics {
  double accuracy;
  double macro_f1;
  double jsd;
  double mse;
} DtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call on this thread.
 */
const char *dt_last_error(void);

/**
 * Library version as a static string.
 */
const char *dt_version(void);

/**
 * Loads checkpoint `name` (for example `student-ours` or `gold_teacher`)
 * from a run directory.
 *
 * # Safety
 * `run_dir` and `name` must be NUL-terminated strings; `out` must be writable.
 */
enum DtStatus dt_model_open(const char *run_dir, const char *name, struct DtModel **out);

/**
 * # Safety
 * `model` must come from [`dt_model_open`] and not be used afterwards.
 */
void dt_model_free(struct DtModel *model);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dt_model_num_classes(const struct DtModel *model);

/**
 * Writes the NUL-terminated name of class `index` into `buf`.
 *
 * # Safety
 * `model` must be a live handle; `buf` must hold `capacity` bytes.
 */
enum DtStatus dt_model_class_name(const struct DtModel *model,
                                  size_t index,
                                  char *buf,
                                  size_t capacity);

/**
 * Predicts the label distribution of a target utterance given its history.
 * `speakers` may be null, in which case every turn is attributed to "user".
 *
 * # Safety
 * `history` (and `speakers` when non-null) must point to `n_history`
 * NUL-terminated strings; `out_probs` must hold `capacity` doubles.
 */
enum DtStatus dt_model_classify(const struct DtModel *model,
                                const char *const *speakers,
                                const char *const *history,
                                size_t n_history,
                                const char *target,
                                double *out_probs,
                                size_t capacity);

/**
 * Writes `gamma * gold + (1 - gamma) * masked` into `out`.
 *
 * # Safety
 * `gold`, `masked` and `out` must each hold `n` doubles.
 */
enum DtStatus dt_joint_score(const double *gold,
                             const double *masked,
                             size_t n,
                             double gamma,
                             double *out);

/**
 * Writes the refined score after bootstrap iteration `i` of `n_iterations`
 * into `out`.
 *
 * # Safety
 * `student`, `reference` and `out` must each hold `n` doubles.
 */
enum DtStatus dt_refine_scores(const double *student,
                               const double *reference,
                               size_t n,
                               size_t i,
                               size_t n_iterations,
                               double alpha,
                               double *out);

/**
 * Scores `n_instances` row-major predicted distributions against gold ones.
 *
 * # Safety
 * `preds` and `golds` must each hold `n_instances * n_classes` doubles;
 * `out` must be writable.
 */
enum DtStatus dt_evaluate(const double *preds,
                          const double *golds,
                          size_t n_instances,
                          size_t n_classes,
                          enum DtMseDivisor divisor,
                          struct DtMetrics *out);

/**
 * Parses a TOML configuration. A null `text` gives the defaults.
 *
 * # Safety
 * `text` must be null or NUL-terminated; `out` must be writable.
 */
enum DtStatus dt_config_parse(const char *text, struct DtConfig **out);

/**
 * Reads a TOML configuration file, applying `DUALTEACH_*` environment overrides.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum DtStatus dt_config_load(const char *path, struct DtConfig **out);

/**
 * # Safety
 * `config` must be a live handle.
 */
enum DtStatus dt_config_set_seed(struct DtConfig *config, uint64_t seed);

/**
 * Selects the strategy by name, for example `ours` or `gold_only`.
 *
 * # Safety
 * `config` must be a live handle; `strategy` must be NUL-terminated.
 */
enum DtStatus dt_config_set_strategy(struct DtConfig *config, const char *strategy);

/**
 * # Safety
 * `config` must come from [`dt_config_parse`] or [`dt_config_load`] and not
 * be used afterwards.
 */
void dt_config_free(struct DtConfig *config);

/**
 * Runs the full pipeline into `out_dir` and writes the final metrics to
 * `out` when it is non-null.
 *
 * # Safety
 * `config` must be a live handle; `out_dir` must be NUL-terminated; `out`
 * must be null or writable.
 */
enum DtStatus dt_run_pipeline(const struct DtConfig *config,
                              const char *out_dir,
                              struct DtMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALTEACH_H */
