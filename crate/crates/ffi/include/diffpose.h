#ifndef DIFFPOSE_H
#define DIFFPOSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DpStatus {
  DP_STATUS_OK = 0,
  DP_STATUS_NULL_POINTER = 1,
  DP_STATUS_INVALID_ARGUMENT = 2,
  DP_STATUS_IO = 3,
  DP_STATUS_FORMAT = 4,
  DP_STATUS_VALIDATION = 5,
  DP_STATUS_NUMERIC = 6,
  DP_STATUS_PANIC = 7,
} DpStatus;

typedef enum DpInferMode {
  DP_INFER_MODE_LITERAL = 0,
  DP_INFER_MODE_DDIM = 1,
} DpInferMode;

/**
 * Trained denoiser with its schedule, prior and inference options.
 */
typedef struct DpModel DpModel;

/**
 * Noise schedule handle.
 */
typedef struct DpSchedule DpSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *dp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dp_version(void);

/**
 * Linear schedule of `steps` betas from `beta_start` to `beta_end`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum DpStatus dp_schedule_new(size_t steps,
                              double beta_start,
                              double beta_end,
                              struct DpSchedule **out);

/**
 * Cumulative signal fraction after `t` steps; `t = 0` gives 1.
 *
 * # Safety
 * `sched` must come from [`dp_schedule_new`]; `out` must be writable.
 */
enum DpStatus dp_schedule_alpha_bar(const struct DpSchedule *sched, size_t t, double *out);

/**
 * # Safety
 * `sched` must be null or a handle from [`dp_schedule_new`] not yet freed.
 */
void dp_schedule_free(struct DpSchedule *sched);

/**
 * Load a training checkpoint and an embedding file.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum DpStatus dp_model_load(const char *checkpoint_path,
                            const char *embeddings_path,
                            struct DpModel **out);

/**
 * Keypoint count, input image height and width of a loaded model.
 *
 * # Safety
 * `m` must be a live model handle; each out pointer must be null or writable.
 */
enum DpStatus dp_model_dims(const struct DpModel *m,
                            size_t *num_keypoints,
                            size_t *height,
                            size_t *width);

/**
 * Estimate keypoints for one `[3, H, W]` image with channel-major values in `[0, 1]`.
 *
 * Writes `x, y` pairs to `coords` (length `2N`) and visibility flags to `visibility` (length `N`).
 *
 * # Safety
 * `image` must hold `image_len` values; `coords` and `visibility` must have room for the outputs.
 */
enum DpStatus dp_model_infer(const struct DpModel *m,
                             const double *image,
                             size_t image_len,
                             enum DpInferMode mode,
                             uint64_t seed,
                             double *coords,
                             uint8_t *visibility);

/**
 * # Safety
 * `m` must be null or a handle from [`dp_model_load`] not yet freed.
 */
void dp_model_free(struct DpModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFPOSE_H */
