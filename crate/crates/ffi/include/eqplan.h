#ifndef EQPLAN_H
#define EQPLAN_H

/* Generated with cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Plan once without feedback.
 */
#define EQP_SCHEDULE_NONE 0

/**
 * Correct with environment feedback after every outer iteration.
 */
#define EQP_SCHEDULE_ENV 1

typedef enum EqpStatus {
  EQP_STATUS_OK = 0,
  EQP_STATUS_NULL_POINTER = 1,
  EQP_STATUS_INVALID_ARGUMENT = 2,
  EQP_STATUS_IO = 3,
  EQP_STATUS_PARSE = 4,
  EQP_STATUS_RUNTIME = 5,
  /**
   * `buf` was too small; `out_len` holds the required size.
   */
  EQP_STATUS_BUFFER_TOO_SMALL = 6,
  EQP_STATUS_PANIC = 7,
} EqpStatus;

/**
 * Category of the feedback an assessment produced.
 */
typedef enum EqpFeedback {
  EQP_FEEDBACK_FORMAT = 0,
  EQP_FEEDBACK_INVALID_COMMAND = 1,
  EQP_FEEDBACK_EXECUTION_ERROR = 2,
  EQP_FEEDBACK_GOAL_REPORT = 3,
  EQP_FEEDBACK_SUCCESS = 4,
} EqpFeedback;

/**
 * Tasks held in memory.
 */
typedef struct EqpDataset EqpDataset;

/**
 * A loaded refiner checkpoint.
 */
typedef struct EqpPlanner EqpPlanner;

typedef struct EqpAssessment {
  bool exec;
  bool success;
  /**
   * Goal-condition recall in `[0, 1]`.
   */
  double gcr;
  enum EqpFeedback feedback;
} EqpAssessment;

typedef struct EqpEpisode {
  bool exec;
  bool success;
  double gcr;
  size_t outer_iterations;
  size_t env_interactions;
  size_t refiner_calls;
} EqpEpisode;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *eqp_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *eqp_version(void);

/**
 * Generates `n_tasks` tasks over `n_scenes` small scenes.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum EqpStatus eqp_dataset_generate(size_t n_tasks,
                                    size_t n_scenes,
                                    uint64_t seed,
                                    struct EqpDataset **out);

/**
 * Loads a `dataset.jsonl` file written by `eqplan gen-tasks`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for one
 * pointer write.
 */
enum EqpStatus eqp_dataset_load(const char *path, struct EqpDataset **out);

/**
 * # Safety
 * `ds` must come from this library and not be used afterwards. Null is a
 * no-op.
 */
void eqp_dataset_free(struct EqpDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle; `out` must be valid for one write.
 */
enum EqpStatus eqp_dataset_len(const struct EqpDataset *ds, size_t *out);

/**
 * Copies the id of task `index` into `buf`.
 *
 * # Safety
 * `ds` must be a live handle; `buf` must hold `cap` bytes; `out_len` may be
 * null.
 */
enum EqpStatus eqp_dataset_task_id(const struct EqpDataset *ds,
                                   size_t index,
                                   char *buf,
                                   size_t cap,
                                   size_t *out_len);

/**
 * Copies the instruction of task `index` into `buf`.
 *
 * # Safety
 * As for [`eqp_dataset_task_id`].
 */
enum EqpStatus eqp_dataset_instruction(const struct EqpDataset *ds,
                                       size_t index,
                                       char *buf,
                                       size_t cap,
                                       size_t *out_len);

/**
 * Copies the ground-truth plan of task `index`, one step per line and
 * closed by `[END]`.
 *
 * # Safety
 * As for [`eqp_dataset_task_id`].
 */
enum EqpStatus eqp_dataset_gt_plan(const struct EqpDataset *ds,
                                   size_t index,
                                   char *buf,
                                   size_t cap,
                                   size_t *out_len);

/**
 * Scores plan text against task `index` in the environment. Plans that
 * do not parse are scored, not rejected.
 *
 * # Safety
 * `ds` must be a live handle, `plan` NUL-terminated and `out` valid for one
 * write.
 */
enum EqpStatus eqp_dataset_assess(const struct EqpDataset *ds,
                                  size_t index,
                                  const char *plan,
                                  bool truncate_illegal,
                                  struct EqpAssessment *out);

/**
 * Loads a refiner checkpoint and its `.json` sidecar.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid for one pointer write.
 */
enum EqpStatus eqp_planner_load(const char *path, struct EqpPlanner **out);

/**
 * # Safety
 * `p` must come from this library and not be used afterwards. Null is a
 * no-op.
 */
void eqp_planner_free(struct EqpPlanner *p);

/**
 * Plans task `index` under `schedule` (an `EQP_SCHEDULE_*` value) with
 * at most `outer_bound` outer iterations.
 *
 * # Safety
 * `planner` and `ds` must be live handles; `out` must be valid for one
 * write.
 */
enum EqpStatus eqp_planner_run(const struct EqpPlanner *planner,
                               const struct EqpDataset *ds,
                               size_t index,
                               uint32_t schedule,
                               size_t outer_bound,
                               uint64_t seed,
                               struct EqpEpisode *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EQPLAN_H */
