/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef VIT_LENS_H
#define VIT_LENS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Selects the head-averaged attention in [`vit_trace_attention`].
 */
#define VIT_HEAD_MEAN -1

/**
 * Result codes.
 */
typedef enum VitStatus {
  VIT_STATUS_OK = 0,
  VIT_STATUS_NULL_ARGUMENT = 1,
  VIT_STATUS_INVALID_ARGUMENT = 2,
  VIT_STATUS_WEIGHT_ERROR = 3,
  VIT_STATUS_IMAGE_ERROR = 4,
  VIT_STATUS_MODEL_ERROR = 5,
  VIT_STATUS_OUT_OF_RANGE = 6,
  VIT_STATUS_BUFFER_TOO_SMALL = 7,
  VIT_STATUS_PANIC = 8,
} VitStatus;

/**
 * How much of the trace to capture.
 */
typedef enum VitCapture {
  VIT_CAPTURE_NONE = 0,
  VIT_CAPTURE_ATTENTION = 1,
  VIT_CAPTURE_FULL = 2,
} VitCapture;

/**
 * Opaque loaded model.
 */
typedef struct VitModel VitModel;

/**
 * Opaque inference result.
 */
typedef struct VitTrace VitTrace;

/**
 * Model hyperparameters.
 */
typedef struct VitModelConfig {
  size_t num_layers;
  size_t num_heads;
  size_t hidden_dim;
  size_t patch_size;
  size_t image_side;
  size_t grid_side;
  size_t num_classes;
  size_t token_count;
} VitModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Valid until the next
 * failing call on the same thread. Never null.
 */
const char *vit_last_error(void);

/**
 * Loads a safetensors file. `num_heads = 0` reads the head count from the
 * file's metadata. `labels_path` may be null.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `labels_path` null or
 * NUL-terminated, `out` a valid pointer.
 */
enum VitStatus vit_model_load(const char *path,
                              const char *labels_path,
                              size_t num_heads,
                              struct VitModel **out);

/**
 * Loads a model from an in-memory safetensors image.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be valid.
 */
enum VitStatus vit_model_load_bytes(const uint8_t *data,
                                    size_t len,
                                    size_t num_heads,
                                    struct VitModel **out);

/**
 * # Safety
 * `model` must come from `vit_model_load*` and not be freed twice. Null is a no-op.
 */
void vit_model_free(struct VitModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum VitStatus vit_model_config(const struct VitModel *model, struct VitModelConfig *out);

/**
 * Decodes a PNG/JPEG buffer and runs the traced forward pass. `top_k`
 * controls the ranked list in the JSON form.
 *
 * # Safety
 * `model` must be valid, `image` must point to `len` readable bytes and
 * `out` must be valid.
 */
enum VitStatus vit_infer(const struct VitModel *model,
                         const uint8_t *image,
                         size_t len,
                         enum VitCapture capture,
                         size_t top_k,
                         struct VitTrace **out);

/**
 * # Safety
 * `trace` must come from `vit_infer` and not be freed twice. Null is a no-op.
 */
void vit_trace_free(struct VitTrace *trace);

/**
 * Predicted class index, or `SIZE_MAX` for a null trace.
 *
 * # Safety
 * `trace` must be null or valid.
 */
size_t vit_trace_predicted_class(const struct VitTrace *trace);

/**
 * Copies the `num_classes` final logits into `out`.
 *
 * # Safety
 * `trace` must be valid; `out` must hold `out_len` floats.
 */
enum VitStatus vit_trace_logits(const struct VitTrace *trace, float *out, size_t out_len);

/**
 * Copies the `num_classes` softmax probabilities into `out`.
 *
 * # Safety
 * `trace` must be valid; `out` must hold `out_len` floats.
 */
enum VitStatus vit_trace_probabilities(const struct VitTrace *trace, float *out, size_t out_len);

/**
 * Copies the `(num_layers + 1) × num_classes` logit-lens matrix, row-major.
 *
 * # Safety
 * `trace` must be valid; `out` must hold `out_len` floats.
 */
enum VitStatus vit_trace_logit_lens(const struct VitTrace *trace, float *out, size_t out_len);

/**
 * Copies one `token_count × token_count` attention matrix, row-major.
 * `head = VIT_HEAD_MEAN` averages over heads.
 *
 * # Safety
 * `trace` must be valid; `out` must hold `out_len` floats.
 */
enum VitStatus vit_trace_attention(const struct VitTrace *trace,
                                   size_t layer,
                                   int32_t head,
                                   float *out,
                                   size_t out_len);

/**
 * The trace JSON document, owned by the trace and valid until
 * `vit_trace_free`.
 *
 * # Safety
 * `trace` must be null or valid.
 */
const char *vit_trace_json(const struct VitTrace *trace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIT_LENS_H */
