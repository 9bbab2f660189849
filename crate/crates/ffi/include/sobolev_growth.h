#ifndef SOBOLEV_GROWTH_H
#define SOBOLEV_GROWTH_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_SCENARIO = 3,
  SG_STATUS_NUMERICAL = 4,
  SG_STATUS_IO = 5,
  /**
   * A certification ran and failed.
   */
  SG_STATUS_REFUTED = 6,
  SG_STATUS_PANIC = 7,
} SgStatus;

typedef enum SgVerdict {
  SG_VERDICT_CERTIFIED_MS = 0,
  SG_VERDICT_REFUTED = 1,
  SG_VERDICT_INCONCLUSIVE = 2,
} SgVerdict;

/**
 * Fourier vector field on the torus.
 */
typedef struct SgField SgField;

/**
 * Sampled norms and final state of a solve.
 */
typedef struct SgSolution SgSolution;

/**
 * Band-limited Fourier coefficients of a solution.
 */
typedef struct SgState SgState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sg_version(void);

/**
 * Message of the last failed call on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *sg_last_error(void);

/**
 * Parses a field from its JSON form.
 *
 * # Safety
 * `json` must be NUL-terminated; `out_field` must be writable.
 */
enum SgStatus sg_field_from_json(const char *json, struct SgField **out_field);

/**
 * # Safety
 * `field` must come from this library or be null.
 */
void sg_field_free(struct SgField *field);

/**
 * Evaluates `V(t, x)`; writes `dim` values into `value`.
 *
 * # Safety
 * `x` and `value` must hold `dim` doubles.
 */
enum SgStatus sg_field_eval(const struct SgField *field, double t, const double *x, double *value);

/**
 * Runs the Morse-Smale check with default parameters.
 *
 * # Safety
 * `field` must be a live handle; `verdict` must be writable.
 */
enum SgStatus sg_ms_check(const struct SgField *field, uint64_t seed, enum SgVerdict *verdict);

/**
 * Gaussian wave packet `χ₀(x) e^{iξ₀·x/h}` on the band `(n0, n1)`; pass
 * `n1 = 0` in one dimension.
 *
 * # Safety
 * `center`, `width` and `xi0` must hold `dim` doubles.
 */
enum SgStatus sg_state_wave_packet(size_t dim,
                                   size_t n0,
                                   size_t n1,
                                   const double *center,
                                   const double *width,
                                   const double *xi0,
                                   double h,
                                   struct SgState **out_state);

/**
 * # Safety
 * `state` must come from this library or be null.
 */
void sg_state_free(struct SgState *state);

/**
 * `‖u‖_σ`.
 *
 * # Safety
 * `state` must be a live handle; `norm` must be writable.
 */
enum SgStatus sg_state_sobolev_norm(const struct SgState *state, double sigma, double *norm);

/**
 * Solves the transport equation of `field` (perturbed by `perturbation`
 * with weight `epsilon` when that handle is non-null) from `initial` up to
 * `t_end`, sampling the norms of order `sigmas` every `sample_interval`.
 *
 * # Safety
 * Handles must be live or null where allowed; `sigmas` must hold
 * `n_sigmas` doubles.
 */
enum SgStatus sg_solve(const struct SgField *field,
                       const struct SgField *perturbation,
                       double epsilon,
                       const struct SgState *initial,
                       double t_end,
                       double sample_interval,
                       const double *sigmas,
                       size_t n_sigmas,
                       struct SgSolution **out_solution);

/**
 * # Safety
 * `solution` must come from this library or be null.
 */
void sg_solution_free(struct SgSolution *solution);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `solution` must be live or null.
 */
size_t sg_solution_len(const struct SgSolution *solution);

/**
 * Sample `i`: time, `L²` norm and the norm for the `j`-th requested σ.
 *
 * # Safety
 * `solution` must be live; the outputs must be writable.
 */
enum SgStatus sg_solution_sample(const struct SgSolution *solution,
                                 size_t i,
                                 size_t j,
                                 double *t,
                                 double *l2,
                                 double *norm);

/**
 * Least-squares slope of `log ‖u‖_σ` on `[t0, t1]`.
 *
 * # Safety
 * `solution` must be live; `rate` must be writable.
 */
enum SgStatus sg_solution_fit_rate(const struct SgSolution *solution,
                                   double sigma,
                                   double t0,
                                   double t1,
                                   double *rate);

/**
 * Runs a scenario file. `verb` is one of the command-line verbs
 * (`"growth"`, `"ms-check"`, ...). Returns [`SgStatus::Refuted`] when a
 * certification fails.
 *
 * # Safety
 * All strings must be NUL-terminated.
 */
enum SgStatus sg_run_scenario(const char *path, const char *verb, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOBOLEV_GROWTH_H */
