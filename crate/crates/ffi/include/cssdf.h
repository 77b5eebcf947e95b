#ifndef CSSDF_H
#define CSSDF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CssdfStatus {
  CSSDF_STATUS_OK = 0,
  CSSDF_STATUS_NULL_POINTER = 1,
  CSSDF_STATUS_INVALID_INPUT = 2,
  CSSDF_STATUS_DIMENSION_MISMATCH = 3,
  CSSDF_STATUS_IO = 4,
  CSSDF_STATUS_FORMAT = 5,
  CSSDF_STATUS_VERSION = 6,
  CSSDF_STATUS_OPTIMIZATION = 7,
  CSSDF_STATUS_PANIC = 8,
  CSSDF_STATUS_OTHER = 9,
} CssdfStatus;

/**
 * Outcome of one controller step.
 */
typedef enum CssdfStepStatus {
  CSSDF_STEP_STATUS_SOLVED = 0,
  CSSDF_STEP_STATUS_FALLBACK = 1,
  CSSDF_STEP_STATUS_EMERGENCY_STOP = 2,
} CssdfStepStatus;

typedef struct CssdfController CssdfController;

typedef struct CssdfField CssdfField;

typedef struct CssdfModel CssdfModel;

typedef struct CssdfRobot CssdfRobot;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *cssdf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cssdf_version(void);

/**
 * Built-in robots: 0 = planar two-link arm, 1 = seven-joint arm.
 */
enum CssdfStatus cssdf_robot_builtin(uint32_t kind, struct CssdfRobot **out);

/**
 * Robot from a description JSON file.
 */
enum CssdfStatus cssdf_robot_load(const char *path, struct CssdfRobot **out);

size_t cssdf_robot_dof(const struct CssdfRobot *robot);

void cssdf_robot_free(struct CssdfRobot *robot);

/**
 * Untrained model sized for `robot`.
 */
enum CssdfStatus cssdf_model_new(const struct CssdfRobot *robot,
                                 uint64_t seed,
                                 struct CssdfModel **out);

enum CssdfStatus cssdf_model_load(const char *path, struct CssdfModel **out);

enum CssdfStatus cssdf_model_save(const struct CssdfModel *model, const char *path);

size_t cssdf_model_dof(const struct CssdfModel *model);

size_t cssdf_model_point_dim(const struct CssdfModel *model);

void cssdf_model_free(struct CssdfModel *model);

/**
 * Distances for `count` pairs: `qs` is `count x dof`, `ps` is
 * `count x point_dim`, `values` receives `count` entries.
 */
enum CssdfStatus cssdf_model_predict(const struct CssdfModel *model,
                                     const double *qs,
                                     const double *ps,
                                     size_t count,
                                     double *values);

/**
 * As [`cssdf_model_predict`], plus `grads` (`count x dof`) with respect to q.
 */
enum CssdfStatus cssdf_model_predict_with_grad(const struct CssdfModel *model,
                                               const double *qs,
                                               const double *ps,
                                               size_t count,
                                               double *values,
                                               double *grads);

/**
 * Grid-oracle field of `robot` in the scene given as JSON (null for an
 * empty scene), `cells` per joint.
 */
enum CssdfStatus cssdf_field_oracle(const struct CssdfRobot *robot,
                                    const char *scene_json,
                                    size_t cells,
                                    struct CssdfField **out);

/**
 * Learned field: `model` queried against the scene's surface points sampled
 * at `spacing`. The model is copied.
 */
enum CssdfStatus cssdf_field_learned(const struct CssdfModel *model,
                                     const char *scene_json,
                                     double spacing,
                                     struct CssdfField **out);

/**
 * Signed distance at `q` and time `t`; `grad` receives `dof` entries.
 */
enum CssdfStatus cssdf_field_distance(const struct CssdfField *field,
                                      const double *q,
                                      double t,
                                      double *value,
                                      double *grad);

void cssdf_field_free(struct CssdfField *field);

/**
 * Safety-filtered MPC for `robot`. `params_json` holds controller settings
 * (any subset; null for defaults).
 */
enum CssdfStatus cssdf_controller_new(const struct CssdfRobot *robot,
                                      const char *params_json,
                                      struct CssdfController **out);

size_t cssdf_controller_horizon(const struct CssdfController *ctrl);

/**
 * One control step at state `q` and time `t`. `reference` is
 * `horizon x dof` (targets for predicted steps 1..=horizon); `u` receives
 * the `dof` joint velocities to apply.
 */
enum CssdfStatus cssdf_controller_step(struct CssdfController *ctrl,
                                       const struct CssdfField *field,
                                       const double *q,
                                       double t,
                                       const double *reference,
                                       double *u,
                                       enum CssdfStepStatus *status);

void cssdf_controller_free(struct CssdfController *ctrl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSSDF_H */
