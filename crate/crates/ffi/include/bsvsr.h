#ifndef BSVSR_H
#define BSVSR_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BsvsrStatus {
  BSVSR_STATUS_OK = 0,
  BSVSR_STATUS_NULL_POINTER = 1,
  BSVSR_STATUS_INVALID_ARGUMENT = 2,
  BSVSR_STATUS_SHAPE = 3,
  BSVSR_STATUS_IO = 4,
  BSVSR_STATUS_PARSE = 5,
  BSVSR_STATUS_INCOMPATIBLE = 6,
  BSVSR_STATUS_NON_FINITE = 7,
  BSVSR_STATUS_PANIC = 8,
} BsvsrStatus;

/**
 * A loaded checkpoint, opaque to C.
 */
typedef struct BsvsrModel BsvsrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *bsvsr_last_error(void);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum BsvsrStatus bsvsr_model_load(const char *path, struct BsvsrModel **out);

/**
 * Release a model; null is ignored.
 *
 * # Safety
 * `model` must be null or come from [`bsvsr_model_load`] and not be used
 * afterwards.
 */
void bsvsr_model_free(struct BsvsrModel *model);

/**
 * Upscaling factor, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model.
 */
uint32_t bsvsr_model_scale(const struct BsvsrModel *model);

/**
 * Frames per input window, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model.
 */
uint32_t bsvsr_model_frames(const struct BsvsrModel *model);

/**
 * Side length of estimated kernels, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model.
 */
uint32_t bsvsr_model_kernel_size(const struct BsvsrModel *model);

/**
 * Super-resolve the centre of a window of `n_frames` LR frames laid out
 * `[n_frames][3][height][width]`. Writes `[3][s*height][s*width]` floats.
 *
 * # Safety
 * `frames` must hold `n_frames*3*height*width` floats and `out` `out_len`.
 */
enum BsvsrStatus bsvsr_model_infer(const struct BsvsrModel *model,
                                   const float *frames,
                                   uintptr_t n_frames,
                                   uintptr_t height,
                                   uintptr_t width,
                                   float *out,
                                   uintptr_t out_len);

/**
 * Estimate the blur kernel of one LR frame `[3][height][width]`. Writes
 * `k*k` floats, `k` from [`bsvsr_model_kernel_size`].
 *
 * # Safety
 * `frame` must hold `3*height*width` floats and `out` `out_len`.
 */
enum BsvsrStatus bsvsr_model_estimate_kernel(const struct BsvsrModel *model,
                                             const float *frame,
                                             uintptr_t height,
                                             uintptr_t width,
                                             float *out,
                                             uintptr_t out_len);

/**
 * Gaussian blur (`sigma`, odd `kernel_size`) then bicubic downsampling by
 * `scale`. Writes `[3][height/scale][width/scale]` floats.
 *
 * # Safety
 * `frame` must hold `3*height*width` floats and `out` `out_len`.
 */
enum BsvsrStatus bsvsr_degrade_frame(const float *frame,
                                     uintptr_t height,
                                     uintptr_t width,
                                     double sigma,
                                     uintptr_t kernel_size,
                                     uintptr_t scale,
                                     float *out,
                                     uintptr_t out_len);

/**
 * PSNR (dB, peak 1, capped at 99) of two `[3][height][width]` images.
 *
 * # Safety
 * `a` and `b` must hold `3*height*width` floats; `out` must be writable.
 */
enum BsvsrStatus bsvsr_psnr(const float *a,
                            const float *b,
                            uintptr_t height,
                            uintptr_t width,
                            double *out);

/**
 * Luminance SSIM of two `[3][height][width]` images (both sides >= 11).
 *
 * # Safety
 * `a` and `b` must hold `3*height*width` floats; `out` must be writable.
 */
enum BsvsrStatus bsvsr_ssim(const float *a,
                            const float *b,
                            uintptr_t height,
                            uintptr_t width,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BSVSR_H */
