#ifndef LUMEN_H
#define LUMEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LumenStatus {
  LUMEN_STATUS_OK = 0,
  LUMEN_STATUS_NULL_POINTER = 1,
  LUMEN_STATUS_INVALID_ARGUMENT = 2,
  LUMEN_STATUS_IO = 3,
  LUMEN_STATUS_CHECKPOINT = 4,
  LUMEN_STATUS_CONFIG = 5,
  LUMEN_STATUS_SHAPE = 6,
  LUMEN_STATUS_NON_FINITE = 7,
  LUMEN_STATUS_BUFFER_TOO_SMALL = 8,
  LUMEN_STATUS_INTERNAL = 9,
  LUMEN_STATUS_PANIC = 10,
} LumenStatus;

// RGB image with values in [0, 1].
typedef struct LumenImage LumenImage;

// Result of a multi-pass enhancement.
typedef struct LumenJob LumenJob;

// Loaded model.
typedef struct LumenModel LumenModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the calling thread's last error message into `buf`.
//
// # Safety
// `buf` must be valid for `len` bytes; `needed` may be null.
enum LumenStatus lumen_last_error(char *buf, size_t len, size_t *needed);

// Load a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum LumenStatus lumen_model_load(const char *path, struct LumenModel **out);

// # Safety
// `model` must come from `lumen_model_load` and not be used afterwards.
void lumen_model_free(struct LumenModel *model);

// Hex SHA-256 of the model parameters, as in the checkpoint manifest.
//
// # Safety
// `model` must be a live handle; `buf` valid for `len` bytes.
enum LumenStatus lumen_model_checkpoint_hash(const struct LumenModel *model,
                                             char *buf,
                                             size_t len,
                                             size_t *needed);

// Image from interleaved 8-bit RGB, `width * height * 3` bytes.
//
// # Safety
// `rgb` must be valid for `len` bytes; `out` must be writable.
enum LumenStatus lumen_image_from_rgb8(size_t width,
                                       size_t height,
                                       const uint8_t *rgb,
                                       size_t len,
                                       struct LumenImage **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum LumenStatus lumen_image_read_png(const char *path, struct LumenImage **out);

// # Safety
// `image` must be a live handle and `path` a NUL-terminated string.
enum LumenStatus lumen_image_write_png(const struct LumenImage *image, const char *path);

// Width in pixels, 0 for a null handle.
//
// # Safety
// `image` must be a live handle or null.
size_t lumen_image_width(const struct LumenImage *image);

// Height in pixels, 0 for a null handle.
//
// # Safety
// `image` must be a live handle or null.
size_t lumen_image_height(const struct LumenImage *image);

// Interleaved 8-bit RGB into `buf`, which needs `width * height * 3` bytes.
//
// # Safety
// `image` must be a live handle; `buf` valid for `len` bytes.
enum LumenStatus lumen_image_to_rgb8(const struct LumenImage *image, uint8_t *buf, size_t len);

// # Safety
// `image` must come from this library and not be used afterwards.
void lumen_image_free(struct LumenImage *image);

// PSNR in dB between two equally sized images.
//
// # Safety
// Both handles must be live; `out_db` writable.
enum LumenStatus lumen_psnr(const struct LumenImage *a, const struct LumenImage *b, double *out_db);

// Run `k` enhancement passes on `image`. Pass 1 uses `instruction`; later
// passes use the model's configured describer. `steps = 0` takes the
// configured sampler length.
//
// # Safety
// `model` and `image` must be live; `instruction` NUL-terminated; `out`
// writable.
enum LumenStatus lumen_enhance(const struct LumenModel *model,
                               const struct LumenImage *image,
                               const char *instruction,
                               size_t k,
                               uint64_t seed,
                               size_t steps,
                               struct LumenJob **out);

// Number of passes in a job, 0 for a null handle.
//
// # Safety
// `job` must be a live handle or null.
size_t lumen_job_iterations(const struct LumenJob *job);

// Copy of the output of pass `index` (0-based).
//
// # Safety
// `job` must be live; `out` writable.
enum LumenStatus lumen_job_image(const struct LumenJob *job, size_t index, struct LumenImage **out);

// Instruction text used by pass `index` (0-based).
//
// # Safety
// `job` must be live; `buf` valid for `len` bytes; `needed` may be null.
enum LumenStatus lumen_job_instruction(const struct LumenJob *job,
                                       size_t index,
                                       char *buf,
                                       size_t len,
                                       size_t *needed);

// # Safety
// `job` must come from `lumen_enhance` and not be used afterwards.
void lumen_job_free(struct LumenJob *job);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LUMEN_H */
