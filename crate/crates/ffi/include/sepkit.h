#ifndef SEPKIT_H
#define SEPKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SepkitStatus {
  SEPKIT_STATUS_OK = 0,
  SEPKIT_STATUS_NULL_POINTER = 1,
  SEPKIT_STATUS_INVALID_ARGUMENT = 2,
  SEPKIT_STATUS_PARSE = 3,
  SEPKIT_STATUS_NUMERICAL = 4,
  SEPKIT_STATUS_IO = 5,
  SEPKIT_STATUS_FAILED = 6,
  SEPKIT_STATUS_PANIC = 7,
} SepkitStatus;

// Trained separating filter.
typedef struct SepkitFilter SepkitFilter;

// Linear-Gaussian state-space model.
typedef struct SepkitLgss SepkitLgss;

// Finite-horizon POMDP.
typedef struct SepkitPomdp SepkitPomdp;

// Message of the last failed call on this thread, or null. Valid until the
// next sepkit call on the same thread.
const char *sepkit_last_error(void);

const char *sepkit_version(void);

// Scalar model `x' = a x + w`, `y = c x + v` with `w ~ N(0, q)`, `v ~ N(0, r)`, `x_0 ~ N(mu0, p0)`.
//
// # Safety
// `out` must be valid for writes.
enum SepkitStatus sepkit_lgss_scalar(double a,
                                     double c,
                                     double q,
                                     double r,
                                     double mu0,
                                     double p0,
                                     struct SepkitLgss **out);

// # Safety
// `json` must be a nul-terminated string and `out` valid for writes.
enum SepkitStatus sepkit_lgss_from_json(const char *json, struct SepkitLgss **out);

// State, observation and control dimensions.
//
// # Safety
// `model` must come from a `sepkit_lgss_*` constructor; outputs valid for writes.
enum SepkitStatus sepkit_lgss_dims(const struct SepkitLgss *model, size_t *n, size_t *m, size_t *p);

// Mean one-step predictive NLL of the Kalman filter on `steps` observations
// (row-major, `steps x m`) with zero controls.
//
// # Safety
// `observations` must hold `steps * m` values; `out` valid for writes.
enum SepkitStatus sepkit_lgss_kalman_nll(const struct SepkitLgss *model,
                                         const double *observations,
                                         size_t steps,
                                         double *out);

// # Safety
// `model` must come from a `sepkit_lgss_*` constructor, or be null.
void sepkit_lgss_free(struct SepkitLgss *model);

// POMDP from JSON with keys `S, A, O, T, Omega, r, b0, H`.
//
// # Safety
// `json` must be a nul-terminated string and `out` valid for writes.
enum SepkitStatus sepkit_pomdp_from_json(const char *json, struct SepkitPomdp **out);

// Optimal expected return over all history-dependent policies.
//
// # Safety
// `pomdp` must come from [`sepkit_pomdp_from_json`]; `out` valid for writes.
enum SepkitStatus sepkit_pomdp_optimal_return(const struct SepkitPomdp *pomdp, double *out);

// Largest Q spread among histories with beliefs within `tol`, and the
// return gap of the belief-indexed policy against the optimum.
//
// # Safety
// `pomdp` must come from [`sepkit_pomdp_from_json`]; outputs valid for writes.
enum SepkitStatus sepkit_pomdp_check_separation(const struct SepkitPomdp *pomdp,
                                                double tol,
                                                double *max_q_spread,
                                                double *policy_gap);

// # Safety
// `pomdp` must come from [`sepkit_pomdp_from_json`], or be null.
void sepkit_pomdp_free(struct SepkitPomdp *pomdp);

// Filter saved by the `seprep` experiment (`filter_model.json`).
//
// # Safety
// `json` must be a nul-terminated string and `out` valid for writes.
enum SepkitStatus sepkit_filter_from_json(const char *json, struct SepkitFilter **out);

// Length of the filter state `phi = (mean, log_std)`.
//
// # Safety
// `filter` must come from [`sepkit_filter_from_json`]; `out` valid for writes.
enum SepkitStatus sepkit_filter_state_len(const struct SepkitFilter *filter, size_t *out);

// Writes the initial state into `phi` (`len` values).
//
// # Safety
// `phi` must be valid for `len` writes.
enum SepkitStatus sepkit_filter_initial(const struct SepkitFilter *filter, double *phi, size_t len);

// One update `phi <- f(phi, y, u)` in place.
//
// # Safety
// `phi` must hold `phi_len` values, `y` and `u` their stated lengths.
enum SepkitStatus sepkit_filter_step(const struct SepkitFilter *filter,
                                     double *phi,
                                     size_t phi_len,
                                     const double *y,
                                     size_t y_len,
                                     const double *u,
                                     size_t u_len,
                                     size_t t);

// # Safety
// `filter` must come from [`sepkit_filter_from_json`], or be null.
void sepkit_filter_free(struct SepkitFilter *filter);

// Runs a named experiment with default parameters, writing its files under
// `out_dir`. `passed` is set to whether every gated metric passed.
//
// # Safety
// `name` and `out_dir` must be nul-terminated strings; `passed` valid for writes.
enum SepkitStatus sepkit_run_experiment(const char *name,
                                        uint64_t seed,
                                        const char *out_dir,
                                        bool *passed);

#endif  /* SEPKIT_H */
