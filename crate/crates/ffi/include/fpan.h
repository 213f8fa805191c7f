#ifndef FPAN_H
#define FPAN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FpanStatus {
  FPAN_STATUS_OK = 0,
  FPAN_STATUS_NULL_POINTER = 1,
  FPAN_STATUS_INVALID_ARGUMENT = 2,
  FPAN_STATUS_IO = 3,
  FPAN_STATUS_CHECKPOINT = 4,
  FPAN_STATUS_CONFIG = 5,
  FPAN_STATUS_RUNTIME = 6,
  FPAN_STATUS_PANIC = 7,
} FpanStatus;

// Opaque model handle.
typedef struct FpanModel FpanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next `fpan_*` call on the same thread.
const char *fpan_last_error(void);

// New randomly initialized model: 64 channels, scales {1, 2, 4},
// `preset` in 0..=4 selects the ablation P0..P4.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum FpanStatus fpan_model_new(uint32_t scale,
                               uint32_t blocks,
                               uint32_t stage_depth,
                               uint32_t preset,
                               uint64_t seed,
                               struct FpanModel **out);

// New randomly initialized tiny model (8 channels, one block).
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum FpanStatus fpan_model_new_tiny(uint32_t scale, uint64_t seed, struct FpanModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum FpanStatus fpan_model_load(const char *path, struct FpanModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum FpanStatus fpan_model_save(const struct FpanModel *model, const char *path);

// Release a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void fpan_model_free(struct FpanModel *model);

// # Safety
// `model` must come from this library; `out` must be valid.
enum FpanStatus fpan_model_scale(const struct FpanModel *model, uint32_t *out);

// # Safety
// `model` must come from this library; `out` must be valid.
enum FpanStatus fpan_model_param_count(const struct FpanModel *model, uint64_t *out);

// Upscale a `width x height` RGB image into `out`, which must hold
// `3 * scale^2 * width * height` bytes (`out_len`). A non-zero `ensemble`
// averages over the eight flips and rotations.
//
// # Safety
// `input` must point to `3 * width * height` bytes and `out` to `out_len` bytes.
enum FpanStatus fpan_super_resolve(const struct FpanModel *model,
                                   const uint8_t *input,
                                   uint32_t width,
                                   uint32_t height,
                                   int ensemble,
                                   uint8_t *out,
                                   size_t out_len);

// Y-channel PSNR in dB after removing `shave` border pixels; +inf for identical images.
//
// # Safety
// `a` and `b` must each point to `3 * width * height` bytes; `out` must be valid.
enum FpanStatus fpan_psnr_y(const uint8_t *a,
                            const uint8_t *b,
                            uint32_t width,
                            uint32_t height,
                            uint32_t shave,
                            double *out);

// Y-channel SSIM after removing `shave` border pixels.
//
// # Safety
// `a` and `b` must each point to `3 * width * height` bytes; `out` must be valid.
enum FpanStatus fpan_ssim_y(const uint8_t *a,
                            const uint8_t *b,
                            uint32_t width,
                            uint32_t height,
                            uint32_t shave,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FPAN_H */
