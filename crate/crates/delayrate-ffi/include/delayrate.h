#ifndef DELAYRATE_H
#define DELAYRATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DrInterpolation {
  DR_INTERPOLATION_MONOTONE_CUBIC = 0,
  DR_INTERPOLATION_LOG_LINEAR = 1,
  DR_INTERPOLATION_NSS = 2,
  DR_INTERPOLATION_NELSON_SIEGEL = 3,
} DrInterpolation;

typedef enum DrStatus {
  DR_STATUS_OK = 0,
  DR_STATUS_NULL_POINTER = 1,
  DR_STATUS_INVALID_ARGUMENT = 2,
  DR_STATUS_NUMERICAL = 3,
  DR_STATUS_PANIC = 4,
} DrStatus;

/**
 * Market yield curve.
 */
typedef struct DrCurve DrCurve;

/**
 * Model parameters with constant a and σ.
 */
typedef struct DrModel DrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t dr_last_error_message(char *buf, size_t len);

/**
 * Build a model with `n` delays.
 *
 * # Safety
 * `c` and `tau` must point to `n` doubles; `out` must be writable.
 */
enum DrStatus dr_model_new(double a,
                           double b,
                           const double *c,
                           const double *tau,
                           size_t n,
                           double sigma,
                           struct DrModel **out);

/**
 * Build a model from its JSON description.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum DrStatus dr_model_from_json(const char *json, struct DrModel **out);

/**
 * # Safety
 * `model` must come from a constructor above and not be used afterwards.
 */
void dr_model_free(struct DrModel *model);

/**
 * Fundamental solution R(t).
 *
 * # Safety
 * Pointers must be valid.
 */
enum DrStatus dr_kernel_r(const struct DrModel *model, double t, double *out);

/**
 * B(0, T) with a flat initial curve equal to `r0`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum DrStatus dr_bond_price_flat(const struct DrModel *model,
                                 double r0,
                                 double maturity,
                                 double *out);

/**
 * Forward-looking caplet on [T − Δ, T] at time 0, per unit notional.
 * `discount` is B(0,T) and `y` is B(0,T−Δ)/B(0,T).
 *
 * # Safety
 * Pointers must be valid.
 */
enum DrStatus dr_caplet_price(const struct DrModel *model,
                              double accrual_end,
                              double delta,
                              double strike,
                              double discount,
                              double y,
                              double *out);

/**
 * Stability verdict (1 when stable for all delays) and the margin |b| − Σ|c|.
 *
 * # Safety
 * Pointers must be valid.
 */
enum DrStatus dr_stability(const struct DrModel *model, int32_t *stable, double *margin);

/**
 * Yield curve from `n` maturities and continuously compounded yields.
 *
 * # Safety
 * `maturities` and `yields` must point to `n` doubles; `out` must be writable.
 */
enum DrStatus dr_curve_new(const double *maturities,
                           const double *yields,
                           size_t n,
                           enum DrInterpolation interpolation,
                           struct DrCurve **out);

/**
 * # Safety
 * `curve` must come from [`dr_curve_new`] and not be used afterwards.
 */
void dr_curve_free(struct DrCurve *curve);

/**
 * Discount factor exp(−y(s) s).
 *
 * # Safety
 * Pointers must be valid.
 */
enum DrStatus dr_curve_discount(const struct DrCurve *curve, double s, double *out);

/**
 * Instantaneous market forward f(0, s).
 *
 * # Safety
 * Pointers must be valid.
 */
enum DrStatus dr_curve_market_forward(const struct DrCurve *curve, double s, double *out);

/**
 * Implied initial curve φ(s), s ∈ [−τ1, 0], for a one-delay model.
 *
 * # Safety
 * Pointers must be valid.
 */
enum DrStatus dr_implied_phi(const struct DrCurve *curve,
                             const struct DrModel *model,
                             double s,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELAYRATE_H */
