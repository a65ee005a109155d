#ifndef PINET_H
#define PINET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

/**
 * Result codes.
 */
typedef enum PinetStatus {
  PINET_STATUS_OK = 0,
  PINET_STATUS_NULL_POINTER = 1,
  PINET_STATUS_INVALID_ARGUMENT = 2,
  PINET_STATUS_INVALID_SPEC = 3,
  PINET_STATUS_IO = 4,
  PINET_STATUS_INTEGRITY = 5,
  PINET_STATUS_DIMENSION = 6,
  PINET_STATUS_BUDGET_EXCEEDED = 7,
  /**
   * A check ran to completion and failed (verification or degree probe).
   */
  PINET_STATUS_CHECK_FAILED = 8,
  PINET_STATUS_PANIC = 9,
} PinetStatus;

/**
 * Opaque model handle.
 */
typedef struct PinetModel PinetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a model from spec text, initialized from the spec's seed. Unset
 * normalization means none.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; `out` must be writable.
 */
enum PinetStatus pinet_model_from_spec(const char *spec, struct PinetModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PinetStatus pinet_model_load(const char *path, struct PinetModel **out);

/**
 * Writes the model as a checkpoint file.
 *
 * # Safety
 * `m` must be a live handle; `path` a NUL-terminated string.
 */
enum PinetStatus pinet_model_save(const struct PinetModel *m, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void pinet_model_free(struct PinetModel *m);

/**
 * Input and output dimensions.
 *
 * # Safety
 * `m` must be a live handle; outputs must be writable.
 */
enum PinetStatus pinet_model_dims(const struct PinetModel *m,
                                  size_t *input_dim,
                                  size_t *output_dim);

/**
 * Number of learnable scalars.
 *
 * # Safety
 * `m` must be a live handle; `out` writable.
 */
enum PinetStatus pinet_model_param_count(const struct PinetModel *m, size_t *out);

/**
 * Product of block orders.
 *
 * # Safety
 * `m` must be a live handle; `out` writable.
 */
enum PinetStatus pinet_model_degree(const struct PinetModel *m, size_t *out);

/**
 * Evaluates the model at `z` (`z_len` = input dim) into `out`
 * (`out_len` = output dim).
 *
 * # Safety
 * `z` must hold `z_len` doubles and `out` room for `out_len`.
 */
enum PinetStatus pinet_model_forward(const struct PinetModel *m,
                                     const double *z,
                                     size_t z_len,
                                     double *out,
                                     size_t out_len);

/**
 * Runs the equivalence oracle (normalization removed) and stores the
 * largest route deviation. Returns `CheckFailed` if it exceeds `tol`;
 * routes over the expansion budget are skipped.
 *
 * # Safety
 * `m` must be a live handle; `max_deviation` writable.
 */
enum PinetStatus pinet_verify(const struct PinetModel *m,
                              size_t trials,
                              double tol,
                              uint64_t seed,
                              double *max_deviation);

/**
 * Degree of the model along `z0 + t v` (largest over outputs), `v` of
 * unit length. Returns `CheckFailed` if it exceeds `max_probe`.
 *
 * # Safety
 * `z0` and `v` must each hold `len` doubles; `degree` writable.
 */
enum PinetStatus pinet_degree_check(const struct PinetModel *m,
                                    const double *z0,
                                    const double *v,
                                    size_t len,
                                    size_t max_probe,
                                    size_t *degree);

/**
 * Message of the last failure on this thread; empty if none. Valid until
 * the next failing call on the same thread.
 */
const char *pinet_last_error(void);

/**
 * Static description of a status code.
 */
const char *pinet_status_str(enum PinetStatus status);

/**
 * Library version, e.g. "0.1.0".
 */
const char *pinet_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PINET_H */
