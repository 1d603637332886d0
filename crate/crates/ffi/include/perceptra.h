#ifndef PERCEPTRA_H
#define PERCEPTRA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum PcStatus {
  PC_STATUS_OK = 0,
  PC_STATUS_NULL_POINTER = 1,
  PC_STATUS_INVALID_ARGUMENT = 2,
  PC_STATUS_SHAPE = 3,
  PC_STATUS_IO = 4,
  PC_STATUS_WEIGHTS = 5,
  PC_STATUS_NUMERIC = 6,
  PC_STATUS_PANIC = 7,
} PcStatus;

// Opaque model handle.
typedef struct PcModel PcModel;

// Byte buffer allocated by the library.
typedef struct PcBuffer {
  uint8_t *data;
  size_t len;
} PcBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *pc_last_error_message(void);

// Builds a model from `builtin:<kind>:<scale>:<seed>` or a weight-file path.
//
// # Safety
// `spec` must be a NUL-terminated string; `out` a writable pointer.
enum PcStatus pc_model_open(const char *spec, struct PcModel **out);

// Builds a model from weight-file bytes.
//
// # Safety
// `bytes` must point to `len` readable bytes.
enum PcStatus pc_model_from_bytes(const uint8_t *bytes, size_t len, struct PcModel **out);

// Serializes a model; release the buffer with [`pc_buffer_free`].
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum PcStatus pc_model_to_bytes(const struct PcModel *model, struct PcBuffer *out);

// Writes a model's weight file to `path`.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum PcStatus pc_model_save(const struct PcModel *model, const char *path);

// Number of tapped layers.
//
// # Safety
// `model` must come from this library.
enum PcStatus pc_model_tap_count(const struct PcModel *model, size_t *out);

// Channel count of every tapped layer, written to `out[0..capacity]`.
// `written` receives the number of taps even when `capacity` is too small.
//
// # Safety
// `out` must hold `capacity` values.
enum PcStatus pc_model_tap_channels(const struct PcModel *model,
                                    size_t *out,
                                    size_t capacity,
                                    size_t *written);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void pc_model_free(struct PcModel *model);

// Releases a buffer from [`pc_model_to_bytes`]. Empty buffers are ignored.
//
// # Safety
// `buffer` must have been filled by this library and not freed before.
void pc_buffer_free(struct PcBuffer buffer);

// Learned perceptual distance between two images of the same shape.
//
// `weights` holds the per-channel weights of every tap concatenated in tap
// order (`weights_len` values) or is null for all ones. `mean_layers`
// averages the layer terms instead of summing them.
//
// # Safety
// Image pointers must hold `channels * height * width` values.
enum PcStatus pc_coper_distance(const struct PcModel *model,
                                const double *weights,
                                size_t weights_len,
                                const double *a,
                                const double *b,
                                size_t channels,
                                size_t height,
                                size_t width,
                                bool mean_layers,
                                double *out);

// Peak signal-to-noise ratio in dB; `+inf` for identical images.
//
// # Safety
// Image pointers must hold `channels * height * width` values.
enum PcStatus pc_psnr(const double *a,
                      const double *b,
                      size_t channels,
                      size_t height,
                      size_t width,
                      double peak,
                      double *out);

// SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.
//
// # Safety
// Image pointers must hold `channels * height * width` values.
enum PcStatus pc_ssim(const double *a,
                      const double *b,
                      size_t channels,
                      size_t height,
                      size_t width,
                      double peak,
                      double *out);

// Mean absolute difference.
//
// # Safety
// Image pointers must hold `channels * height * width` values.
enum PcStatus pc_l1(const double *a,
                    const double *b,
                    size_t channels,
                    size_t height,
                    size_t width,
                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERCEPTRA_H */
