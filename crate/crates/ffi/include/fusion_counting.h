#ifndef FUSION_COUNTING_H
#define FUSION_COUNTING_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Architecture and training mode of a model.
 */
typedef enum FcMode {
  FC_MODE_MULTITASK = 0,
  FC_MODE_ST_FUSION = 1,
  FC_MODE_ST_COUNT = 2,
  FC_MODE_NO_DW = 3,
  FC_MODE_SERIES = 4,
} FcMode;

/**
 * Result codes of all fallible calls.
 */
typedef enum FcStatus {
  FC_STATUS_OK = 0,
  FC_STATUS_NULL_POINTER = 1,
  FC_STATUS_INVALID_ARGUMENT = 2,
  FC_STATUS_IO = 3,
  FC_STATUS_FORMAT = 4,
  FC_STATUS_COMPUTE = 5,
  FC_STATUS_PANIC = 6,
} FcStatus;

/**
 * Opaque model handle.
 */
typedef struct FcModel FcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *fc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fc_version(void);

/**
 * Freshly initialized model for `mode` and `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum FcStatus fc_model_init(enum FcMode mode, uint64_t seed, struct FcModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FcStatus fc_model_load(const char *path, struct FcModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum FcStatus fc_model_save(const struct FcModel *model, const char *path);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle from this library not yet freed.
 */
void fc_model_free(struct FcModel *model);

/**
 * Mode recorded in the model.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum FcStatus fc_model_mode(const struct FcModel *model, enum FcMode *out);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum FcStatus fc_model_num_params(const struct FcModel *model, size_t *out);

/**
 * Density-map size for an `height x width` input.
 *
 * # Safety
 * `out_height` and `out_width` must be writable.
 */
enum FcStatus fc_density_size(size_t height, size_t width, size_t *out_height, size_t *out_width);

/**
 * Runs both heads on one image pair.
 *
 * `visible` holds `3 * height * width` planar RGB values and `infrared`
 * `height * width` values, all in `[0, 1]`. `fused` receives `height * width`
 * values; `density` receives the map of [`fc_density_size`]; `count` the
 * density sum. Any output pointer may be NULL to skip it.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum FcStatus fc_model_forward(const struct FcModel *model,
                               const float *visible,
                               const float *infrared,
                               size_t height,
                               size_t width,
                               float *fused,
                               float *density,
                               double *count);

/**
 * Writes a synthetic dataset of `count` samples to `out_dir`.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
enum FcStatus fc_synth_dataset(const char *out_dir,
                               size_t count,
                               size_t height,
                               size_t width,
                               size_t min_people,
                               size_t max_people,
                               uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FUSION_COUNTING_H */
