#ifndef FRAGSPLAT_H
#define FRAGSPLAT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FspStatus {
  FSP_STATUS_OK = 0,
  FSP_STATUS_NULL_POINTER = 1,
  FSP_STATUS_INVALID_ARGUMENT = 2,
  FSP_STATUS_CONFIG = 3,
  FSP_STATUS_DATA = 4,
  FSP_STATUS_NUMERICAL = 5,
  FSP_STATUS_PANIC = 6,
} FspStatus;

/**
 * Run settings; see the `key = value` config keys.
 */
typedef struct FspConfig FspConfig;

typedef struct FspGaussianSet FspGaussianSet;

/**
 * A finished reconstruction with its holdout scores.
 */
typedef struct FspReconstruction FspReconstruction;

/**
 * World-to-camera pose: translation then unit quaternion (x, y, z, w).
 */
typedef struct FspPose {
  double translation[3];
  double rotation[4];
} FspPose;

/**
 * Camera model: focal lengths and principal point in pixels.
 */
typedef struct FspCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} FspCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fsp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fsp_version(void);

/**
 * New config holding the defaults.
 */
struct FspConfig *fsp_config_new(void);

/**
 * # Safety
 * `cfg` must come from [`fsp_config_new`] and not have been freed.
 */
void fsp_config_free(struct FspConfig *cfg);

/**
 * Sets one key, exactly as a config file line would.
 *
 * # Safety
 * `cfg` must be a live config handle; `key` and `value` NUL-terminated.
 */
enum FspStatus fsp_config_set(struct FspConfig *cfg, const char *key, const char *value);

/**
 * Loads a `key = value` file into a new config.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum FspStatus fsp_config_load(const char *path, struct FspConfig **out);

/**
 * Runs the full pipeline on the config's `frames`, `bundle` and `out`
 * paths and writes the run directory.
 *
 * # Safety
 * `cfg` must be a live config handle; `out` must be writable.
 */
enum FspStatus fsp_reconstruct(const struct FspConfig *cfg, struct FspReconstruction **out);

/**
 * # Safety
 * `rec` must come from [`fsp_reconstruct`] and not have been freed.
 */
void fsp_reconstruction_free(struct FspReconstruction *rec);

/**
 * Number of frames in the recovered trajectory; 0 for a null handle.
 *
 * # Safety
 * `rec` must be null or a live reconstruction handle.
 */
size_t fsp_reconstruction_frame_count(const struct FspReconstruction *rec);

/**
 * Number of Gaussians in the merged scene; 0 for a null handle.
 *
 * # Safety
 * `rec` must be null or a live reconstruction handle.
 */
size_t fsp_reconstruction_gaussian_count(const struct FspReconstruction *rec);

/**
 * Frame index and pose of the `i`-th trajectory entry.
 *
 * # Safety
 * `rec` must be a live reconstruction handle; `frame` and `pose` writable.
 */
enum FspStatus fsp_reconstruction_pose(const struct FspReconstruction *rec,
                                       size_t i,
                                       uint32_t *frame,
                                       struct FspPose *pose);

/**
 * Holdout summary. `ate` is NaN when the run had no reference trajectory.
 *
 * # Safety
 * `rec` must be a live reconstruction handle; outputs writable.
 */
enum FspStatus fsp_reconstruction_scores(const struct FspReconstruction *rec,
                                         double *mean_psnr,
                                         double *mean_ssim,
                                         double *ate);

/**
 * Loads a serialized Gaussian set.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum FspStatus fsp_set_load(const char *path, struct FspGaussianSet **out);

/**
 * # Safety
 * `set` must come from [`fsp_set_load`] and not have been freed.
 */
void fsp_set_free(struct FspGaussianSet *set);

/**
 * # Safety
 * `set` must be null or a live set handle.
 */
size_t fsp_set_len(const struct FspGaussianSet *set);

/**
 * Renders `set` into `rgb`, which must hold `3 * width * height` values in
 * row-major RGB order.
 *
 * # Safety
 * `set` must be a live set handle and `rgb` valid for `len` writes.
 */
enum FspStatus fsp_set_render(const struct FspGaussianSet *set,
                              struct FspCamera camera,
                              struct FspPose pose,
                              double *rgb,
                              size_t len);

/**
 * Prior pairs a run over `n` frames in fragments of `k` reads, as
 * `(view_a, view_b)` couples flattened into `out`. `count` always receives
 * the number of pairs; when `cap` (in pairs) is smaller, nothing is written
 * and `InvalidArgument` is returned.
 *
 * # Safety
 * `count` must be writable and `out` valid for `2 * cap` writes.
 */
enum FspStatus fsp_required_pairs(size_t n, size_t k, uint32_t *out, size_t cap, size_t *count);

/**
 * Clears the thread's error message.
 */
void fsp_clear_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRAGSPLAT_H */
