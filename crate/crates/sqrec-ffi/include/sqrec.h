#ifndef SQREC_H
#define SQREC_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
#define SQREC_OK 0

#define SQREC_ERR_NULL_ARGUMENT 1

#define SQREC_ERR_INVALID_ARGUMENT 2

#define SQREC_ERR_INSUFFICIENT_POINTS 3

#define SQREC_ERR_FIT_FAILURE 4

#define SQREC_ERR_PANIC 5

/**
 * Opaque point cloud.
 */
typedef struct SqrecCloud SqrecCloud;

/**
 * Opaque fit result.
 */
typedef struct SqrecFitResult SqrecFitResult;

/**
 * Fit configuration mirroring the library defaults; initialize with
 * `sqrec_fit_config_default` and override fields as needed.
 */
typedef struct SqrecFitConfig {
  uintptr_t max_em_iters;
  double rel_tol_nll;
  uintptr_t max_switches;
  double w_o;
  /**
   * 0 = fast bilinear area blend, 1 = numerical quadrature
   */
  int32_t area_mode;
  uint64_t seed;
} SqrecFitConfig;

/**
 * Superquadric parameters; rotation is a unit quaternion `[w, x, y, z]`.
 */
typedef struct SqrecSuperquadric {
  double eps1;
  double eps2;
  double ax;
  double ay;
  double az;
  double rotation[4];
  double translation[3];
} SqrecSuperquadric;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sqrec_last_error_message(void);

/**
 * Create a cloud from `n` interleaved xyz triples (length `3 * n`).
 *
 * # Safety
 * `xyz` must point to `3 * n` readable doubles and `out` must be a valid
 * destination for a pointer.
 */
int32_t sqrec_cloud_create(const double *xyz, uintptr_t n, struct SqrecCloud **out);

/**
 * # Safety
 * `cloud` must be a pointer returned by `sqrec_cloud_create` (or null).
 */
void sqrec_cloud_free(struct SqrecCloud *cloud);

uintptr_t sqrec_cloud_len(const struct SqrecCloud *cloud);

int32_t sqrec_fit_config_default(struct SqrecFitConfig *out);

/**
 * Fit a superquadric; pass a null `config` for defaults.
 *
 * # Safety
 * `cloud` must be a live cloud handle; `config` null or valid; `out` a
 * valid destination for a pointer.
 */
int32_t sqrec_fit(const struct SqrecCloud *cloud,
                  const struct SqrecFitConfig *config,
                  struct SqrecFitResult **out);

/**
 * # Safety
 * `fit` must be a pointer returned by `sqrec_fit` (or null).
 */
void sqrec_fit_result_free(struct SqrecFitResult *fit);

int32_t sqrec_fit_result_superquadric(const struct SqrecFitResult *fit,
                                      struct SqrecSuperquadric *out);

double sqrec_fit_result_sigma2(const struct SqrecFitResult *fit);

double sqrec_fit_result_nll(const struct SqrecFitResult *fit);

uintptr_t sqrec_fit_result_iterations(const struct SqrecFitResult *fit);

/**
 * Copy the per-point inlier probabilities into `out` (capacity `cap`);
 * returns the number of values written.
 *
 * # Safety
 * `out` must have room for `cap` doubles.
 */
uintptr_t sqrec_fit_result_weights(const struct SqrecFitResult *fit, double *out, uintptr_t cap);

/**
 * Evaluate the implicit function at a world-space point.
 */
int32_t sqrec_implicit_value(const struct SqrecSuperquadric *params,
                             double x,
                             double y,
                             double z,
                             double *out);

/**
 * Sample the surface at roughly equidistant spacing. On success `*points`
 * holds `3 * *n` doubles owned by the library; release with
 * `sqrec_points_free`.
 *
 * # Safety
 * `params`, `points` and `n` must be valid pointers.
 */
int32_t sqrec_sample_surface(const struct SqrecSuperquadric *params,
                             double spacing,
                             double **points,
                             uintptr_t *n);

/**
 * # Safety
 * `points`/`n` must come from a successful `sqrec_sample_surface` call.
 */
void sqrec_points_free(double *points, uintptr_t n);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SQREC_H */
