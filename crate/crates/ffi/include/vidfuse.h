#ifndef VIDFUSE_H
#define VIDFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum VfStatus {
  VF_STATUS_OK = 0,
  VF_STATUS_NULL_POINTER = 1,
  VF_STATUS_INVALID_ARGUMENT = 2,
  VF_STATUS_SHAPE = 3,
  VF_STATUS_IO = 4,
  VF_STATUS_FORMAT = 5,
  VF_STATUS_NUMERIC = 6,
  VF_STATUS_CONFIG = 7,
  VF_STATUS_PANIC = 8,
} VfStatus;

/*
 Opaque video or flow tensor with dims `(T, C, H, W)` in row-major order.
 */
typedef struct VfTensor VfTensor;

/*
 Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *vf_last_error_message(void);

/*
 Copies `len` floats into a new tensor with dims `dims[0..4]`.

 # Safety
 `dims` must point to 4 values and `data` to `len` floats.
 */
enum VfStatus vf_tensor_new(const size_t *dims,
                            const float *data,
                            size_t len,
                            struct VfTensor **out);

/*
 Releases a tensor. Null is ignored.

 # Safety
 `t` must come from this library and not be used afterwards.
 */
void vf_tensor_free(struct VfTensor *t);

/*
 Writes the 4 dims of `t` to `out`.

 # Safety
 `out` must have room for 4 values.
 */
enum VfStatus vf_tensor_dims(const struct VfTensor *t, size_t *out);

/*
 Borrowed pointer to the tensor data; `len` receives the element count.
 Null when `t` is null. Valid while `t` lives.

 # Safety
 `t` must be a live handle; `len` may be null.
 */
const float *vf_tensor_data(const struct VfTensor *t, size_t *len);

/*
 Reads a `.vten` file.

 # Safety
 `path` must be a NUL-terminated string.
 */
enum VfStatus vf_tensor_load(const char *path, struct VfTensor **out);

/*
 Writes a `.vten` file.

 # Safety
 `path` must be a NUL-terminated string.
 */
enum VfStatus vf_tensor_save(const struct VfTensor *t, const char *path);

/*
 PSNR of `a` against `b` in dB, capped at 99.

 # Safety
 Handles must be live; `out` must be writable.
 */
enum VfStatus vf_psnr(const struct VfTensor *a, const struct VfTensor *b, double *out);

/*
 Mean SSIM of `a` against `b`.

 # Safety
 Handles must be live; `out` must be writable.
 */
enum VfStatus vf_ssim(const struct VfTensor *a, const struct VfTensor *b, double *out);

/*
 Warping error of `video` under `flow` (dims `(T-1, 2, H, W)`).

 # Safety
 Handles must be live; `out` must be writable.
 */
enum VfStatus vf_warping_error(const struct VfTensor *video,
                               const struct VfTensor *flow,
                               double *out);

/*
 No-reference sharpness score.

 # Safety
 The handle must be live; `out` must be writable.
 */
enum VfStatus vf_sharpness(const struct VfTensor *video, double *out);

/*
 Synthetic clip `kind` (`moving_square`, `ramp`, `static`) and its flow.

 # Safety
 `kind` must be a NUL-terminated string; both outputs must be writable.
 */
enum VfStatus vf_generate_synthetic(const char *kind,
                                    size_t frames,
                                    size_t height,
                                    size_t width,
                                    uint64_t seed,
                                    struct VfTensor **video_out,
                                    struct VfTensor **flow_out);

/*
 Applies the configured degradation. `config_toml` may be null for defaults.

 # Safety
 `clean` must be live; `config_toml` null or NUL-terminated.
 */
enum VfStatus vf_degrade(const struct VfTensor *clean,
                         const char *config_toml,
                         struct VfTensor **out);

/*
 Restores `input`. `ground_truth`, `flow` and `config_toml` may be null.
 On success `out` holds the restored clip and `report_json` the run report,
 to be released with [`vf_string_free`].

 # Safety
 Non-null handles must be live; both outputs must be writable.
 */
enum VfStatus vf_restore(const struct VfTensor *input,
                         const struct VfTensor *ground_truth,
                         const struct VfTensor *flow,
                         const char *config_toml,
                         struct VfTensor **out,
                         char **report_json);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be used afterwards.
 */
void vf_string_free(char *s);

#endif  /* VIDFUSE_H */
