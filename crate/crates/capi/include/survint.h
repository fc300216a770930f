#ifndef SURVINT_H
#define SURVINT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define SURVINT_OK 0

/**
 * Invalid arguments or usage.
 */
#define SURVINT_ERR_USAGE 1

/**
 * Input data failed validation.
 */
#define SURVINT_ERR_DATA 2

/**
 * A numerical procedure failed.
 */
#define SURVINT_ERR_NUMERIC 3

/**
 * A required pointer was null or a string was not valid UTF-8.
 */
#define SURVINT_ERR_POINTER 4

/**
 * Opaque joint posterior draws of `(beta, sigma2, a)`.
 */
typedef struct SurvintDraws SurvintDraws;

/**
 * An opaque loaded sample.
 */
typedef struct SurvintSample SurvintSample;

/**
 * Posterior summary of the finite population mean.
 */
typedef struct SurvintSummary {
  double pm;
  double psd;
  double pcv;
  double nse;
  double hpd_lower;
  double hpd_upper;
} SurvintSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *survint_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *survint_version(void);

/**
 * Load a sample from a headered CSV.
 *
 * `role` is 0 for the non-probability sample and 1 for the probability
 * sample; `weight_column` may be null for an nps; `study_columns` is an
 * array of `n_study` column names; `intercept` nonzero prepends a constant
 * column. Returns null on failure.
 *
 * # Safety
 * All non-null pointers must reference valid NUL-terminated strings, and
 * `study_columns` must point to `n_study` such pointers.
 */
struct SurvintSample *survint_sample_load_csv(const char *path,
                                              int role,
                                              const char *response_column,
                                              const char *weight_column,
                                              const char *const *study_columns,
                                              uintptr_t n_study,
                                              int intercept);

/**
 * # Safety
 * `sample` must come from `survint_sample_load_csv` and not be freed twice.
 */
void survint_sample_free(struct SurvintSample *sample);

/**
 * Number of rows in a loaded sample; 0 for a null handle.
 *
 * # Safety
 * `sample` must be a live handle or null.
 */
uintptr_t survint_sample_rows(const struct SurvintSample *sample);

/**
 * Fit one scenario (letter `'B'`, `'C'`, `'D'`, `'E'` or `'G'`) and return
 * posterior draws. Null on failure.
 *
 * # Safety
 * Both handles must be live sample handles.
 */
struct SurvintDraws *survint_fit(const struct SurvintSample *nps,
                                 const struct SurvintSample *ps,
                                 char scenario,
                                 uintptr_t grid_size,
                                 uintptr_t draws,
                                 uint64_t seed,
                                 double a_min,
                                 double a_max);

/**
 * # Safety
 * `draws` must come from `survint_fit` and not be freed twice.
 */
void survint_draws_free(struct SurvintDraws *draws);

/**
 * Number of retained draws; 0 for null.
 *
 * # Safety
 * `draws` must be a live handle or null.
 */
uintptr_t survint_draws_len(const struct SurvintDraws *draws);

/**
 * Number of regression coefficients; 0 for null.
 *
 * # Safety
 * `draws` must be a live handle or null.
 */
uintptr_t survint_draws_coefficients(const struct SurvintDraws *draws);

/**
 * Copy the discount-factor draws into `out` (capacity >= draw count).
 *
 * # Safety
 * `draws` must be live; `out` must point to at least `capacity` doubles.
 */
int survint_draws_get_a(const struct SurvintDraws *draws, double *out, uintptr_t capacity);

/**
 * Copy the variance draws into `out` (capacity >= draw count).
 *
 * # Safety
 * `draws` must be live; `out` must point to at least `capacity` doubles.
 */
int survint_draws_get_sigma2(const struct SurvintDraws *draws, double *out, uintptr_t capacity);

/**
 * Copy coefficient `j`'s draws into `out` (capacity >= draw count).
 *
 * # Safety
 * `draws` must be live; `out` must point to at least `capacity` doubles.
 */
int survint_draws_get_beta(const struct SurvintDraws *draws,
                           uintptr_t j,
                           double *out,
                           uintptr_t capacity);

/**
 * Posterior summary of the finite population mean under external facts:
 * `n_hat` and the `p` covariate means in `xbar`.
 *
 * # Safety
 * `draws` must be live; `xbar` must point to `p` doubles; `summary_out`
 * must be a valid pointer.
 */
int survint_predict_mean(const struct SurvintDraws *draws,
                         double n_hat,
                         const double *xbar,
                         uintptr_t p,
                         struct SurvintSummary *summary_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SURVINT_H */
