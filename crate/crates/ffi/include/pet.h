#ifndef PET_H
#define PET_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum PetStatus {
  PET_STATUS_OK = 0,
  PET_STATUS_NULL_ARGUMENT = 1,
  PET_STATUS_INVALID_UTF8 = 2,
  PET_STATUS_CONFIG_ERROR = 3,
  PET_STATUS_DATA_ERROR = 4,
  PET_STATUS_BACKEND_ERROR = 5,
  PET_STATUS_PANIC = 6,
  PET_STATUS_NOT_FOUND = 7,
} PetStatus;

typedef struct PetClassifier PetClassifier;

typedef struct PetConfig PetConfig;

typedef struct PetReport PetReport;

typedef struct PetTask PetTask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *pet_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *pet_last_error(void);

/**
 * # Safety
 * `s` must come from this library or be NULL.
 */
void pet_string_free(char *s);

/**
 * Loads a task file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PetStatus pet_task_load(const char *path, struct PetTask **out);

/**
 * Parses a task from TOML text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PetStatus pet_task_from_toml(const char *text, struct PetTask **out);

/**
 * # Safety
 * `task` must be a live handle or NULL.
 */
uintptr_t pet_task_num_labels(const struct PetTask *task);

/**
 * # Safety
 * `task` must come from `pet_task_load`/`pet_task_from_toml` or be NULL.
 */
void pet_task_free(struct PetTask *task);

/**
 * Parses a run config from TOML text; NULL gives the defaults.
 *
 * # Safety
 * `text` must be NULL or NUL-terminated, `out` a valid pointer.
 */
enum PetStatus pet_config_from_toml(const char *text, struct PetConfig **out);

/**
 * Derives every module seed from `seed`.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum PetStatus pet_config_set_seed(struct PetConfig *config, uint64_t seed);

/**
 * # Safety
 * `config` must come from `pet_config_from_toml` or be NULL.
 */
void pet_config_free(struct PetConfig *config);

/**
 * Runs `command` (`pet`, `ipet`, `supervised` or `avs`) into `out_dir`.
 * `test` may be NULL. `jobs` of 0 means one.
 *
 * # Safety
 * Strings must be NUL-terminated, handles live and `out` valid.
 */
enum PetStatus pet_run(const char *command,
                       const struct PetTask *task,
                       const struct PetConfig *config,
                       const char *train,
                       const char *unlabeled,
                       const char *test,
                       const char *out_dir,
                       uintptr_t jobs,
                       struct PetReport **out);

/**
 * Re-executes a run from its manifest into `out_dir`; fails with
 * `DataError` when the metrics differ.
 *
 * # Safety
 * Strings must be NUL-terminated and `out` valid.
 */
enum PetStatus pet_rerun(const char *run_dir, const char *out_dir, struct PetReport **out);

/**
 * Accuracy of the last report row with the given stage (`final`,
 * `supervised`, `pvp-mean`, ...). `NotFound` when there is none.
 *
 * # Safety
 * `report` must be live, `stage` NUL-terminated, `out` valid.
 */
enum PetStatus pet_report_accuracy(const struct PetReport *report, const char *stage, double *out);

/**
 * The report as JSON; free with `pet_string_free`.
 *
 * # Safety
 * `report` must be live and `out` valid.
 */
enum PetStatus pet_report_json(const struct PetReport *report, char **out);

/**
 * # Safety
 * `report` must come from this library or be NULL.
 */
void pet_report_free(struct PetReport *report);

/**
 * Loads the `classifier` or `supervised` model of a finished run.
 *
 * # Safety
 * Strings must be NUL-terminated and `out` valid.
 */
enum PetStatus pet_classifier_load(const char *run_dir,
                                   const char *name,
                                   struct PetClassifier **out);

/**
 * # Safety
 * `classifier` must be live or NULL.
 */
uintptr_t pet_classifier_num_labels(const struct PetClassifier *classifier);

/**
 * Label probabilities for one input of `n_segments` text segments,
 * written to `probs`, which holds `n_labels` doubles.
 *
 * # Safety
 * `segments` must point to `n_segments` NUL-terminated strings and `probs`
 * to `n_labels` writable doubles.
 */
enum PetStatus pet_classifier_predict(const struct PetClassifier *classifier,
                                      const char *const *segments,
                                      uintptr_t n_segments,
                                      double *probs,
                                      uintptr_t n_labels);

/**
 * # Safety
 * `classifier` must come from `pet_classifier_load` or be NULL.
 */
void pet_classifier_free(struct PetClassifier *classifier);

/**
 * Temperature softmax of `n` scores into `out`.
 *
 * # Safety
 * `scores` and `out` must each point to `n` doubles.
 */
enum PetStatus pet_soft_label(const double *scores, uintptr_t n, double temperature, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PET_H */
