#ifndef PLMCAST_H
#define PLMCAST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PlmcastStatus {
  PLMCAST_STATUS_OK = 0,
  PLMCAST_STATUS_NULL_POINTER = 1,
  PLMCAST_STATUS_INVALID_ARGUMENT = 2,
  PLMCAST_STATUS_IO = 3,
  PLMCAST_STATUS_LOAD = 4,
  PLMCAST_STATUS_SHAPE = 5,
  PLMCAST_STATUS_NUMERIC = 6,
  PLMCAST_STATUS_INTERNAL = 7,
} PlmcastStatus;

/**
 * A loaded model. Only ever handled through a pointer.
 */
typedef struct PlmcastModel PlmcastModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *plmcast_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *plmcast_version(void);

/**
 * Loads a checkpoint file. On success `*out` owns a model that must be released
 * with [`plmcast_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PlmcastStatus plmcast_model_load(const char *path, struct PlmcastModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`plmcast_model_load`] and not be used afterwards.
 */
void plmcast_model_free(struct PlmcastModel *model);

/**
 * Number of channels `C`; 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t plmcast_model_channels(const struct PlmcastModel *model);

/**
 * Input length `T`; 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t plmcast_model_input_len(const struct PlmcastModel *model);

/**
 * Horizon `F`; 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t plmcast_model_horizon(const struct PlmcastModel *model);

/**
 * Forecasts `n_windows` raw windows laid out `[n_windows, C, T]` into `output`
 * laid out `[n_windows, C, F]`. `output_len` must equal `n_windows * C * F`.
 *
 * # Safety
 * `input` must hold `n_windows * C * T` values and `output` `output_len` values.
 */
enum PlmcastStatus plmcast_predict(const struct PlmcastModel *model,
                                   const double *input,
                                   size_t n_windows,
                                   double *output,
                                   size_t output_len);

/**
 * Mean squared error of two length-`len` arrays.
 *
 * # Safety
 * `pred` and `truth` must hold `len` values; `out` must be valid.
 */
enum PlmcastStatus plmcast_mse(const double *pred, const double *truth, size_t len, double *out);

/**
 * Mean absolute error of two length-`len` arrays.
 *
 * # Safety
 * As for [`plmcast_mse`].
 */
enum PlmcastStatus plmcast_mae(const double *pred, const double *truth, size_t len, double *out);

/**
 * Linear CKA between row-major `x` (`n x dx`) and `y` (`n x dy`).
 *
 * # Safety
 * `x` must hold `n * dx` values, `y` `n * dy`; `out` must be valid.
 */
enum PlmcastStatus plmcast_linear_cka(const double *x,
                                      const double *y,
                                      size_t n,
                                      size_t dx,
                                      size_t dy,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLMCAST_H */
