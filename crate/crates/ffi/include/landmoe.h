#ifndef LANDMOE_H
#define LANDMOE_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values are stable.
 */
typedef enum LmStatus {
  LM_STATUS_OK = 0,
  LM_STATUS_NULL_POINTER = 1,
  LM_STATUS_INVALID_UTF8 = 2,
  LM_STATUS_BUFFER_SIZE = 3,
  LM_STATUS_SHAPE = 10,
  LM_STATUS_DEGENERATE = 11,
  LM_STATUS_CONTRACT = 12,
  LM_STATUS_NUMERICAL = 13,
  LM_STATUS_CONFIG = 14,
  LM_STATUS_DATA = 15,
  LM_STATUS_FORMAT = 16,
  LM_STATUS_IO = 17,
  LM_STATUS_PANIC = 99,
} LmStatus;

/**
 * Opaque model handle.
 */
typedef struct LmModel LmModel;

/**
 * Trainable scalars per parameter group.
 */
typedef struct LmParamCount {
  size_t router;
  size_t experts;
  size_t shared_mlp;
  size_t filter;
  size_t head;
  size_t total;
} LmParamCount;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until
 * the next call on the same thread.
 */
const char *lm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lm_version(void);

/**
 * Desk-scale model for `profile` ("cross-sensor" or "cross-geospatial").
 *
 * # Safety
 * `profile` must be NUL-terminated; `out` must be writable.
 */
enum LmStatus lm_model_new_desk(const char *profile, uint64_t seed, struct LmModel **out);

/**
 * Model from `key=value` lines over the desk defaults.
 *
 * # Safety
 * `config` must be NUL-terminated; `out` must be writable.
 */
enum LmStatus lm_model_from_config(const char *config, uint64_t seed, struct LmModel **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum LmStatus lm_model_load(const char *path, struct LmModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` must be NUL-terminated.
 */
enum LmStatus lm_model_save(const struct LmModel *model, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void lm_model_free(struct LmModel *model);

/**
 * Expected input extents `height × width × channels` and the class count.
 *
 * # Safety
 * `model` must be a live handle; every out pointer must be writable.
 */
enum LmStatus lm_model_dims(const struct LmModel *model,
                            size_t *height,
                            size_t *width,
                            size_t *channels,
                            size_t *classes);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum LmStatus lm_model_param_count(const struct LmModel *model, struct LmParamCount *out);

/**
 * Eval-mode pixel logits, row-major `H×W×K`.
 *
 * # Safety
 * `image` must hold `image_len` doubles (row-major `H×W×C`); `logits`
 * must hold `logits_len` doubles.
 */
enum LmStatus lm_model_predict(const struct LmModel *model,
                               const double *image,
                               size_t image_len,
                               double *logits,
                               size_t logits_len);

/**
 * Eval-mode label map, row-major `H×W`.
 *
 * # Safety
 * `image` must hold `image_len` doubles; `labels` must hold `labels_len` values.
 */
enum LmStatus lm_model_segment(const struct LmModel *model,
                               const double *image,
                               size_t image_len,
                               uint32_t *labels,
                               size_t labels_len);

/**
 * Runs training from `key=value` settings over the desk defaults and
 * returns the best checkpoint's model. `out_dir` may be NULL to skip
 * writing files; `best_miou` may be NULL.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum LmStatus lm_train(const char *config,
                       const char *out_dir,
                       struct LmModel **out,
                       double *best_miou);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANDMOE_H */
