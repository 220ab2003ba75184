#ifndef TSDR_H
#define TSDR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsdrStatus {
  TSDR_STATUS_OK = 0,
  TSDR_STATUS_NULL_POINTER = 1,
  TSDR_STATUS_INVALID_INPUT = 2,
  TSDR_STATUS_DEGENERATE = 3,
  TSDR_STATUS_SELECTION_FAILED = 4,
  TSDR_STATUS_FORMAT = 5,
  TSDR_STATUS_IO = 6,
  TSDR_STATUS_BUFFER_TOO_SMALL = 7,
  TSDR_STATUS_PANIC = 8,
} TsdrStatus;

/**
 * Opaque fitted 2SDR model.
 */
typedef struct TsdrModel TsdrModel;

/**
 * Opaque image stack.
 */
typedef struct TsdrStack TsdrStack;

/**
 * Fit options. Zero (or a non-positive `sigma2`) means "choose automatically".
 */
typedef struct TsdrFitOptions {
  size_t p_u;
  size_t q_u;
  double sigma2;
  size_t r_max;
} TsdrFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tsdr_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *tsdr_last_error_message(void);

/**
 * Builds a stack from `n*p*q` doubles, each image stored row-major.
 *
 * # Safety
 * `data` must point to `n*p*q` readable doubles; `out` must be writable.
 */
enum TsdrStatus tsdr_stack_from_row_major(size_t n,
                                          size_t p,
                                          size_t q,
                                          const double *data,
                                          struct TsdrStack **out);

/**
 * Reads a stack; the format follows the extension (`.mrc`/`.mrcs`, `.csv`, else container).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TsdrStatus tsdr_stack_read(const char *path, struct TsdrStack **out);

/**
 * Writes a stack; the format follows the extension.
 *
 * # Safety
 * `stack` must be a live handle and `path` a NUL-terminated string.
 */
enum TsdrStatus tsdr_stack_write(const struct TsdrStack *stack, const char *path);

/**
 * # Safety
 * `stack` must be a live handle; the output pointers must be writable.
 */
enum TsdrStatus tsdr_stack_dims(const struct TsdrStack *stack, size_t *n, size_t *p, size_t *q);

/**
 * Copies the `n*p*q` values (row-major per image) into `buf`.
 *
 * # Safety
 * `buf` must have room for `len` doubles.
 */
enum TsdrStatus tsdr_stack_copy_data(const struct TsdrStack *stack, double *buf, size_t len);

/**
 * Releases a stack. NULL is ignored.
 *
 * # Safety
 * `stack` must come from this library and not be used afterwards.
 */
void tsdr_stack_free(struct TsdrStack *stack);

/**
 * Fits a 2SDR model. `options` may be NULL for all defaults.
 *
 * # Safety
 * `stack` must be a live handle, `options` NULL or readable, `out` writable.
 */
enum TsdrStatus tsdr_fit(const struct TsdrStack *stack,
                         const struct TsdrFitOptions *options,
                         struct TsdrModel **out);

/**
 * # Safety
 * `model` must be a live handle; the output pointers must be writable.
 */
enum TsdrStatus tsdr_model_ranks(const struct TsdrModel *model, size_t *p0, size_t *q0, size_t *r);

/**
 * Noise variance used for rank selection; NaN when none was recorded.
 *
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
enum TsdrStatus tsdr_model_sigma2(const struct TsdrModel *model, double *out);

/**
 * Writes the `n x r` score matrix row-major into `buf`.
 *
 * # Safety
 * `buf` must have room for `len` doubles.
 */
enum TsdrStatus tsdr_scores(const struct TsdrModel *model,
                            const struct TsdrStack *stack,
                            double *buf,
                            size_t len);

/**
 * Denoised copy of `stack` as a new handle.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum TsdrStatus tsdr_denoise(const struct TsdrModel *model,
                             const struct TsdrStack *stack,
                             struct TsdrStack **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum TsdrStatus tsdr_model_save(const struct TsdrModel *model, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum TsdrStatus tsdr_model_load(const char *path, struct TsdrModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void tsdr_model_free(struct TsdrModel *model);

/**
 * Mean squared error between two stacks of equal shape.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum TsdrStatus tsdr_mse(const struct TsdrStack *a, const struct TsdrStack *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSDR_H */
