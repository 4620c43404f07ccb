#ifndef CCL_H
#define CCL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum CclStatus {
  CCL_STATUS_OK = 0,
  CCL_STATUS_NULL_POINTER = 1,
  CCL_STATUS_INVALID_ARGUMENT = 2,
  CCL_STATUS_IO = 3,
  CCL_STATUS_SHAPE = 4,
  CCL_STATUS_INTERNAL = 5,
  CCL_STATUS_PANIC = 6,
} CclStatus;

/**
 * A loaded model. Create with [`ccl_model_load`], release with
 * [`ccl_model_free`].
 */
typedef struct CclModel CclModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *ccl_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ccl_version(void);

/**
 * Loads `checkpoint.bin` (or a run directory containing it).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CclStatus ccl_model_load(const char *path, struct CclModel **out);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` must come from [`ccl_model_load`] and not be used afterwards.
 */
void ccl_model_free(struct CclModel *model);

/**
 * Side length of the square anomaly maps this model produces.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CclStatus ccl_model_resolution(const struct CclModel *model, size_t *out);

/**
 * Scores one interleaved 8-bit RGB image of `width`×`height` pixels. The
 * image is resized to the model resolution `r`; `out_map` receives `r*r`
 * row-major scores and `out_score` the image score. `sigma` is the
 * Gaussian smoothing width in pixels.
 *
 * # Safety
 * `rgb` must hold `width*height*3` bytes, `out_map` room for `r*r`
 * doubles, `out_score` one double.
 */
enum CclStatus ccl_model_score(const struct CclModel *model,
                               const uint8_t *rgb,
                               size_t width,
                               size_t height,
                               double sigma,
                               double *out_map,
                               double *out_score);

/**
 * Image-level AUROC of `n` scores against 0/1 labels.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be writable.
 */
enum CclStatus ccl_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * AUPRO up to `fpr_limit` over `count` maps of `height`×`width` scores with
 * matching 0/1 masks, using `thresholds` evenly spaced thresholds.
 *
 * # Safety
 * `maps` and `masks` must each hold `count*height*width` elements.
 */
enum CclStatus ccl_aupro(const double *maps,
                         const uint8_t *masks,
                         size_t count,
                         size_t height,
                         size_t width,
                         double fpr_limit,
                         size_t thresholds,
                         double *out);

/**
 * V-measure of `n` predicted cluster ids against true class ids.
 *
 * # Safety
 * `predicted` and `truth` must hold `n` elements; `out` must be writable.
 */
enum CclStatus ccl_v_measure(const size_t *predicted, const size_t *truth, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCL_H */
