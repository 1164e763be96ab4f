#ifndef PHREG_H
#define PHREG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum PhregStatus {
  PHREG_STATUS_OK = 0,
  PHREG_STATUS_NULL_POINTER = 1,
  PHREG_STATUS_INVALID_ARGUMENT = 2,
  PHREG_STATUS_SHAPE = 3,
  PHREG_STATUS_IO = 4,
  PHREG_STATUS_FORMAT = 5,
  PHREG_STATUS_CONFIG = 6,
  PHREG_STATUS_NUMERIC = 7,
  PHREG_STATUS_PANIC = 8,
} PhregStatus;

/**
 * Opaque dense feature grid, `rows × cols × dim` row-major.
 */
typedef struct PhregFeatures PhregFeatures;

/**
 * Opaque model handle.
 */
typedef struct PhregModel PhregModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *phreg_last_error(void);

/**
 * Build the noisy teacher described by a run config. `config_toml` may be
 * null for the default config.
 *
 * # Safety
 * `config_toml` must be null or a NUL-terminated string; `out` must be a
 * valid pointer.
 */
enum PhregStatus phreg_teacher_new(const char *config_toml, struct PhregModel **out);

/**
 * Load a checkpoint written by `phreg distill`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum PhregStatus phreg_model_load(const char *path, struct PhregModel **out);

/**
 * Save a model as a checkpoint container.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum PhregStatus phreg_model_save(const struct PhregModel *model, const char *path);

/**
 * Input size, patch size, embedding width and register count.
 *
 * # Safety
 * `model` must come from this library. Output pointers may be null.
 */
enum PhregStatus phreg_model_info(const struct PhregModel *model,
                                  size_t *height,
                                  size_t *width,
                                  size_t *patch_size,
                                  size_t *dim,
                                  size_t *registers);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed at most once.
 */
void phreg_model_free(struct PhregModel *model);

/**
 * Dense patch features for an interleaved RGB image of `height × width × 3`
 * floats in `[0, 1]`.
 *
 * # Safety
 * `pixels` must point to `height * width * 3` floats; `model` must come
 * from this library; `out` must be a valid pointer.
 */
enum PhregStatus phreg_forward(const struct PhregModel *model,
                               const float *pixels,
                               size_t height,
                               size_t width,
                               struct PhregFeatures **out);

/**
 * Test-time-augmentation denoising with `n_augmentations` views (the first
 * is the identity), drawn deterministically from `seed`.
 *
 * # Safety
 * As for [`phreg_forward`].
 */
enum PhregStatus phreg_denoise(const struct PhregModel *model,
                               const float *pixels,
                               size_t height,
                               size_t width,
                               size_t n_augmentations,
                               uint64_t seed,
                               struct PhregFeatures **out);

/**
 * Grid extents. Output pointers may be null.
 *
 * # Safety
 * `features` must come from this library.
 */
enum PhregStatus phreg_features_shape(const struct PhregFeatures *features,
                                      size_t *rows,
                                      size_t *cols,
                                      size_t *dim);

/**
 * Borrowed pointer to `rows * cols * dim` floats, valid until the handle is
 * freed. Null for a null handle.
 *
 * # Safety
 * `features` must be null or come from this library.
 */
const float *phreg_features_data(const struct PhregFeatures *features);

/**
 * Borrowed pointer to `rows * cols` per-location view counts. Raw forward
 * outputs report 1 everywhere.
 *
 * # Safety
 * `features` must be null or come from this library.
 */
const uint32_t *phreg_features_coverage(const struct PhregFeatures *features);

/**
 * # Safety
 * `features` must be null or a handle from this library, freed at most once.
 */
void phreg_features_free(struct PhregFeatures *features);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHREG_H */
