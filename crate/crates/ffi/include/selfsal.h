#ifndef SELFSAL_H
#define SELFSAL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of every fallible call.
typedef enum SelfsalStatus {
  SELFSAL_STATUS_OK = 0,
  SELFSAL_STATUS_NULL_POINTER = 1,
  // Bad argument value, configuration, or UTF-8.
  SELFSAL_STATUS_INVALID_ARGUMENT = 2,
  // Buffer sizes or map dimensions disagree.
  SELFSAL_STATUS_SHAPE = 3,
  // File could not be read or decoded.
  SELFSAL_STATUS_IO = 4,
  // Checkpoint contents are malformed.
  SELFSAL_STATUS_FORMAT = 5,
  // Non-finite or out-of-range numbers.
  SELFSAL_STATUS_NUMERIC = 6,
  SELFSAL_STATUS_PANIC = 7,
} SelfsalStatus;

// Opaque network handle with the configuration used for pseudo labels.
typedef struct SelfsalModel SelfsalModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *selfsal_version(void);

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *selfsal_last_error(void);

// Loads a checkpoint. Training checkpoints yield their student network and
// the configuration they were trained with.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SelfsalStatus selfsal_model_load(const char *path, struct SelfsalModel **out);

// Freshly initialised network for the default configuration with the
// given class count and seed.
//
// # Safety
// `out` must be a valid pointer.
enum SelfsalStatus selfsal_model_init(uint32_t classes, uint64_t seed, struct SelfsalModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void selfsal_model_free(struct SelfsalModel *model);

// Applies one `key=value` configuration override to the handle.
//
// # Safety
// `model` must be a live handle and `assignment` NUL-terminated.
enum SelfsalStatus selfsal_model_configure(struct SelfsalModel *model, const char *assignment);

// Predicted saliency map, written to `out` (`height * width` doubles).
//
// # Safety
// `rgb` must hold `3 * height * width` bytes and `out` `height * width`
// doubles.
enum SelfsalStatus selfsal_infer(const struct SelfsalModel *model,
                                 const uint8_t *rgb,
                                 uint32_t height,
                                 uint32_t width,
                                 double *out);

// Pseudo label of an image with Sobel edges. The soft label goes to
// `soft_out`; the binary one to `hard_out` as 0/1 bytes when it is not
// null.
//
// # Safety
// `rgb` must hold `3 * height * width` bytes, `soft_out` `height * width`
// doubles and `hard_out`, if not null, `height * width` bytes.
enum SelfsalStatus selfsal_pseudo_gt(const struct SelfsalModel *model,
                                     const uint8_t *rgb,
                                     uint32_t height,
                                     uint32_t width,
                                     double *soft_out,
                                     uint8_t *hard_out);

// Mean absolute error of two maps of `len` values.
//
// # Safety
// `pred` and `gt` must hold `len` doubles; `out` must be valid.
enum SelfsalStatus selfsal_mae(const double *pred, const double *gt, size_t len, double *out);

// F-measure of `pred` against the binary mask `gt` (values `>= 0.5` are
// foreground), averaged over the 256 thresholds.
//
// # Safety
// `pred` and `gt` must hold `height * width` doubles; `out` must be valid.
enum SelfsalStatus selfsal_f_beta(const double *pred,
                                  const double *gt,
                                  uint32_t height,
                                  uint32_t width,
                                  double beta2,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELFSAL_H */
