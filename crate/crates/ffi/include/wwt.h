#ifndef WWT_H
#define WWT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum WwtStatus {
  WWT_STATUS_OK = 0,
  WWT_STATUS_NULL_POINTER = 1,
  WWT_STATUS_INVALID_ARGUMENT = 2,
  WWT_STATUS_SHAPE = 3,
  WWT_STATUS_NON_FINITE = 4,
  WWT_STATUS_CONFIG = 5,
  WWT_STATUS_CHECKPOINT = 6,
  WWT_STATUS_PARSE = 7,
  WWT_STATUS_DATA = 8,
  WWT_STATUS_IO = 9,
  WWT_STATUS_DIVERGED = 10,
  WWT_STATUS_BACKWARD = 11,
  /**
   * The library panicked; the handle involved should not be reused.
   */
  WWT_STATUS_INTERNAL = 12,
  /**
   * A nonempty result did not exist (for example no region was found).
   */
  WWT_STATUS_NOT_FOUND = 13,
} WwtStatus;

/**
 * Opaque model: configuration plus parameters.
 */
typedef struct WwtModel WwtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or an empty string. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *wwt_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *wwt_version(void);

/**
 * Freshly initialized reference model for `num_classes` classes.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum WwtStatus wwt_model_new(uint32_t num_classes, uint64_t seed, struct WwtModel **out);

/**
 * Load a checkpoint. `config_path` names a run config file; pass null for
 * the reference configuration.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum WwtStatus wwt_model_load(const char *config_path,
                              const char *checkpoint_path,
                              struct WwtModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum WwtStatus wwt_model_save(const struct WwtModel *model, const char *path);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void wwt_model_free(struct WwtModel *model);

/**
 * Image side, slot count and class count of a model.
 *
 * # Safety
 * `model` must be a live handle; output pointers may be null.
 */
enum WwtStatus wwt_model_dims(const struct WwtModel *model,
                              uint32_t *image_size,
                              uint32_t *slots,
                              uint32_t *num_classes);

/**
 * Image-level class probabilities written to `probs[0..num_classes]`.
 *
 * # Safety
 * `rgb` must hold `rgb_len` floats and `probs` `probs_len` doubles.
 */
enum WwtStatus wwt_classify(const struct WwtModel *model,
                            const float *rgb,
                            uintptr_t rgb_len,
                            double *probs,
                            uintptr_t probs_len);

/**
 * Head-averaged slot masks, row-major `[tokens][slots]`.
 *
 * # Safety
 * `rgb` must hold `rgb_len` floats and `out` `out_len` doubles.
 */
enum WwtStatus wwt_slot_masks(const struct WwtModel *model,
                              const float *rgb,
                              uintptr_t rgb_len,
                              double *out,
                              uintptr_t out_len);

/**
 * Single-object discovery: the most concentrated region's pixel box
 * `[x0, y0, x1, y1]` (half-open). Returns `NotFound` when no region
 * survives thresholding.
 *
 * # Safety
 * `rgb` must hold `rgb_len` floats and `box_out` four doubles.
 */
enum WwtStatus wwt_discover(const struct WwtModel *model,
                            const float *rgb,
                            uintptr_t rgb_len,
                            double threshold,
                            double *box_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WWT_H */
