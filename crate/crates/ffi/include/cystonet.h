#ifndef CYSTONET_H
#define CYSTONET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CnStatus {
  Ok = 0,
  NullPointer = 1,
  InvalidArgument = 2,
  Io = 3,
  Parse = 4,
  Validation = 5,
  Shape = 6,
  Image = 7,
  Tensor = 8,
  Undefined = 9,
  Config = 10,
  BufferTooSmall = 11,
  Panic = 12,
  Internal = 13,
} CnStatus;

typedef enum CnTask {
  Classify = 0,
  Segment = 1,
  Subtype = 2,
} CnTask;

/**
 * Opaque model handle.
 */
typedef struct CnModel CnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *cn_last_error(void);

/**
 * Library version, static string.
 */
const char *cn_version(void);

/**
 * Loads a checkpoint directory or exported file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` writable.
 */
enum CnStatus cn_model_open(const char *path, struct CnModel **out_model);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`cn_model_open`] and not be used afterwards.
 */
void cn_model_free(struct CnModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out_task` writable.
 */
enum CnStatus cn_model_task(const struct CnModel *model, enum CnTask *out_task);

/**
 * Version string of the loaded weights, owned by the handle.
 *
 * # Safety
 * `model` must be a live handle.
 */
const char *cn_model_version(const struct CnModel *model);

/**
 * Number of floats [`cn_model_predict_rgb`] writes for a `width`x`height`
 * input: 1 (classify), 3 (subtype) or `width * height` (segment).
 *
 * # Safety
 * `model` must be a live handle; `out_len` writable.
 */
enum CnStatus cn_model_output_len(const struct CnModel *model,
                                  uint32_t width,
                                  uint32_t height,
                                  uintptr_t *out_len);

/**
 * Runs the model on interleaved 8-bit RGB pixels and writes sigmoid
 * probabilities; segmentation maps come back at the input resolution.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` bytes and `probs` `probs_len` floats.
 */
enum CnStatus cn_model_predict_rgb(const struct CnModel *model,
                                   const uint8_t *rgb,
                                   uint32_t width,
                                   uint32_t height,
                                   float *probs,
                                   uintptr_t probs_len);

/**
 * Rank-based ROC AUC; labels are 0/1 bytes.
 *
 * # Safety
 * `scores` and `labels` must each hold `n` elements; `out_auc` writable.
 */
enum CnStatus cn_roc_auc(const double *scores, const uint8_t *labels, uintptr_t n, double *out_auc);

/**
 * Dice and IoU of two row-major 0/1 masks.
 *
 * # Safety
 * `pred` and `truth` must hold `height * width` bytes; outputs writable.
 */
enum CnStatus cn_dice_iou(const uint8_t *pred,
                          const uint8_t *truth,
                          uintptr_t height,
                          uintptr_t width,
                          double *out_dice,
                          double *out_iou);

/**
 * Label-permutation test of the AUC with `n_perms` seeded shuffles.
 *
 * # Safety
 * `scores` and `labels` must each hold `n` elements; outputs writable.
 */
enum CnStatus cn_permutation_test(const double *scores,
                                  const uint8_t *labels,
                                  uintptr_t n,
                                  uintptr_t n_perms,
                                  uint64_t seed,
                                  double *out_observed,
                                  double *out_p_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CYSTONET_H */
