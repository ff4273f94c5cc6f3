#ifndef TRIDIFF_H
#define TRIDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TdStatus {
  TD_STATUS_OK = 0,
  TD_STATUS_INVALID_ARGUMENT = 1,
  TD_STATUS_FORMAT = 2,
  TD_STATUS_NUMERIC = 3,
  TD_STATUS_IO = 4,
  TD_STATUS_NULL_POINTER = 5,
  TD_STATUS_PANIC = 6,
} TdStatus;

typedef struct TdModel TdModel;

typedef struct TdSkeleton TdSkeleton;

typedef struct TdTriplane TdTriplane;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *td_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *td_last_error(void);

/**
 * Load a skeleton from a JSON file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum TdStatus td_skeleton_load(const char *path, struct TdSkeleton **out_skeleton);

/**
 * Build a skeleton from `num_joints` xyz triples and `num_bones` index pairs.
 *
 * # Safety
 * `joints` must hold `3 * num_joints` doubles and `bones` `2 * num_bones` values.
 */
enum TdStatus td_skeleton_new(const double *joints,
                              uintptr_t num_joints,
                              const uint32_t *bones,
                              uintptr_t num_bones,
                              struct TdSkeleton **out_skeleton);

/**
 * # Safety
 * `skeleton` must come from this library or be null.
 */
void td_skeleton_free(struct TdSkeleton *skeleton);

/**
 * Rasterize a skeleton at `size x size` over the default `[-1, 1]^3` bounds
 * into an encoding triplane with `channels` channels per field.
 *
 * # Safety
 * Pointers must be valid handles / writable slots.
 */
enum TdStatus td_encode_skeleton(const struct TdSkeleton *skeleton,
                                 uintptr_t size,
                                 uintptr_t channels,
                                 struct TdTriplane **out_triplane);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out_triplane` writable.
 */
enum TdStatus td_triplane_load(const char *path, struct TdTriplane **out_triplane);

/**
 * # Safety
 * `triplane` must be a valid handle and `path` a nul-terminated string.
 */
enum TdStatus td_triplane_save(const struct TdTriplane *triplane, const char *path);

/**
 * Channels per field, height and width.
 *
 * # Safety
 * `triplane` must be a valid handle; output pointers may be null.
 */
enum TdStatus td_triplane_dims(const struct TdTriplane *triplane,
                               uintptr_t *channels,
                               uintptr_t *height,
                               uintptr_t *width);

/**
 * # Safety
 * `triplane` must come from this library or be null.
 */
void td_triplane_free(struct TdTriplane *triplane);

/**
 * Load a checkpoint directory written by training.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out_model` writable.
 */
enum TdStatus td_model_load(const char *dir, struct TdModel **out_model);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void td_model_free(struct TdModel *model);

/**
 * Generate the init character in the target pose.
 *
 * # Safety
 * All handles must be valid and `out_triplane` writable.
 */
enum TdStatus td_repose(const struct TdModel *model,
                        const struct TdTriplane *init,
                        const struct TdSkeleton *target,
                        uint64_t seed,
                        struct TdTriplane **out_triplane);

/**
 * Render with the analytic decoder. `view` is `+x`, `-x`, `+y`, `-y`, `+z`,
 * `-z` or `azimuth,elevation` in degrees. `rgb` receives `3 * size * size`
 * floats and `alpha` `size * size` floats, row-major from the top-left;
 * either may be null.
 *
 * # Safety
 * Buffers, when non-null, must have the stated lengths.
 */
enum TdStatus td_render(const struct TdTriplane *triplane,
                        const char *view,
                        uintptr_t size,
                        uintptr_t samples,
                        double density_scale,
                        float *rgb,
                        float *alpha);

/**
 * Render with the analytic decoder and write a binary PPM.
 *
 * # Safety
 * `triplane` must be valid; strings nul-terminated.
 */
enum TdStatus td_render_ppm(const struct TdTriplane *triplane,
                            const char *view,
                            uintptr_t size,
                            uintptr_t samples,
                            double density_scale,
                            const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRIDIFF_H */
