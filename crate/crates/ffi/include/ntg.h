#ifndef NTG_H
#define NTG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every `ntg_*` call.
typedef enum NtgStatus {
  NTG_STATUS_OK = 0,
  NTG_STATUS_NULL_POINTER = 1,
  NTG_STATUS_INVALID_ARGUMENT = 2,
  NTG_STATUS_SHAPE_MISMATCH = 3,
  NTG_STATUS_IO = 4,
  NTG_STATUS_FORMAT = 5,
  NTG_STATUS_NON_FINITE = 6,
  NTG_STATUS_PANIC = 7,
} NtgStatus;

// Which pyramid levels receive swapped texture during synthesis.
typedef enum NtgTextureMode {
  NTG_TEXTURE_MODE_FULL = 0,
  NTG_TEXTURE_MODE_SINGLE_SCALE = 1,
  NTG_TEXTURE_MODE_NONE = 2,
} NtgTextureMode;

// Channels × height × width array of doubles.
typedef struct NtgGrid NtgGrid;

// Feature extractor plus generator.
typedef struct NtgModel NtgModel;

// Image quality of one output against its target, on 8-bit exports.
typedef struct NtgMetrics {
  double ssim;
  double mse;
  // Infinite when the images are identical.
  double psnr;
  double histcorr;
} NtgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next `ntg_*` call on the same thread.
const char *ntg_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ntg_version(void);

// Copies `channels * height * width` doubles from `data` into a new grid.
// A NULL `data` gives a zero-filled grid.
//
// # Safety
// `data` must be NULL or point to that many doubles; `out` must be writable.
enum NtgStatus ntg_grid_new(size_t channels,
                            size_t height,
                            size_t width,
                            const double *data,
                            struct NtgGrid **out);

// # Safety
// `grid` must be NULL or a handle from this library not yet freed.
void ntg_grid_free(struct NtgGrid *grid);

// # Safety
// `grid` must be a live handle; the out pointers may be NULL.
enum NtgStatus ntg_grid_shape(const struct NtgGrid *grid,
                              size_t *channels,
                              size_t *height,
                              size_t *width);

// Borrowed pointer to the channel-major data, valid while `grid` lives.
// NULL when `grid` is NULL.
//
// # Safety
// `grid` must be NULL or a live handle.
const double *ntg_grid_data(const struct NtgGrid *grid);

// Reads a binary PGM (P5) as a one-channel grid in [0, 1].
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum NtgStatus ntg_grid_read_pgm(const char *path, struct NtgGrid **out);

// # Safety
// `grid` must be a live one-channel handle; `path` a NUL-terminated string.
enum NtgStatus ntg_grid_write_pgm(const struct NtgGrid *grid, const char *path);

// Loads extractor and generator sections from an NTX1 weight file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum NtgStatus ntg_model_load(const char *path, struct NtgModel **out);

// Untrained model with seeded weights for one-channel images.
// `scale` is 1 (translation) or 2 (super-resolution).
//
// # Safety
// `plan` must point to `plan_len` values; `out` must be writable.
enum NtgStatus ntg_model_seeded(uint64_t seed,
                                const size_t *plan,
                                size_t plan_len,
                                size_t scale,
                                struct NtgModel **out);

// # Safety
// `model` must be NULL or a handle from this library not yet freed.
void ntg_model_free(struct NtgModel *model);

// Number of pyramid levels of the model.
//
// # Safety
// `model` must be a live handle; `levels` must be writable.
enum NtgStatus ntg_model_levels(const struct NtgModel *model, size_t *levels);

// Translates `input` using texture matched from `refs` (3×3 patches,
// references blurred by `blur_factor`). `refs` may be NULL when `mode`
// is `NTG_TEXTURE_MODE_NONE`.
//
// # Safety
// `model` and `input` must be live handles, `refs` must point to `n_refs`
// live grid handles, and `out` must be writable.
enum NtgStatus ntg_synthesize(const struct NtgModel *model,
                              const struct NtgGrid *input,
                              const struct NtgGrid *const *refs,
                              size_t n_refs,
                              enum NtgTextureMode mode,
                              double blur_factor,
                              struct NtgGrid **out);

// Replaces every `patch_size` patch of `input_features` with the raw
// reference patch whose blurred counterpart matches best. The result has
// the shape of `input_features`.
//
// # Safety
// Grid arguments must be live handles; `out` must be writable.
enum NtgStatus ntg_swap_features(const struct NtgGrid *input_features,
                                 const struct NtgGrid *ref_raw,
                                 const struct NtgGrid *ref_blur,
                                 size_t patch_size,
                                 struct NtgGrid **out);

// SSIM, MSE, PSNR and histogram correlation of `output` against `target`.
//
// # Safety
// Grid arguments must be live handles; `metrics` must be writable.
enum NtgStatus ntg_evaluate(const struct NtgGrid *output,
                            const struct NtgGrid *target,
                            struct NtgMetrics *metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NTG_H */
