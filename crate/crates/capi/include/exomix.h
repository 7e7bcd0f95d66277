#ifndef EXOMIX_H
#define EXOMIX_H

/* Generated by cbindgen from exomix-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call across the ABI.
 */
typedef enum ExomixStatus {
  EXOMIX_STATUS_OK = 0,
  EXOMIX_STATUS_NULL_POINTER = 1,
  EXOMIX_STATUS_INVALID_ARGUMENT = 2,
  EXOMIX_STATUS_DATA_ERROR = 3,
  EXOMIX_STATUS_ESTIMATION_ERROR = 4,
} ExomixStatus;

/**
 * Observations (rows x cols coordinates) plus an optional outcome column.
 */
typedef struct ExomixDataset ExomixDataset;

/**
 * A fitted mixture.
 */
typedef struct ExomixFit ExomixFit;

/**
 * Estimation settings; see `exomix_fit_options_default` for the defaults.
 */
typedef struct ExomixFitOptions {
  size_t max_iterations;
  double tolerance;
  size_t restarts;
  uint64_t seed;
  /**
   * 0 evaluates densities exactly; otherwise the linear-binned grid size
   * (at least 64).
   */
  size_t density_grid;
  /**
   * Nonzero re-derives per-component bandwidths each iteration.
   */
  int32_t adaptive_bandwidth;
  /**
   * A positive value fixes the kernel bandwidth; otherwise it is derived
   * from the pooled sample.
   */
  double fixed_bandwidth;
} ExomixFitOptions;

/**
 * Second-stage results of the one-shot pipeline.
 */
typedef struct ExomixPipelineResult {
  double intercept;
  double slope;
  /**
   * Classical standard error of the subset slope.
   */
  double slope_se;
  double r_squared;
  size_t n_selected;
  /**
   * Bootstrap fields are zero unless replicates were requested.
   */
  double bootstrap_se;
  double interval_low;
  double interval_high;
  size_t replicates_used;
  size_t replicates_failed;
} ExomixPipelineResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message into `buffer` (NUL-terminated, truncated to
 * `capacity`); returns the full message length in bytes. A zero `capacity`
 * just queries the length.
 *
 * # Safety
 * `buffer`, when non-NULL, must point to at least `capacity` bytes.
 */
size_t exomix_last_error_message(char *buffer, size_t capacity);

/**
 * Fill `options` with the library defaults.
 *
 * # Safety
 * `options` must be a valid location for one `ExomixFitOptions`.
 */
enum ExomixStatus exomix_fit_options_default(struct ExomixFitOptions *options);

/**
 * Build a dataset from a row-major `rows x cols` array; `outcome` may be
 * NULL or point to `rows` values.
 *
 * # Safety
 * `values` must point to `rows * cols` doubles and `outcome`, when non-NULL,
 * to `rows` doubles. The returned handle must be released with
 * [`exomix_dataset_free`].
 */
enum ExomixStatus exomix_dataset_new(const double *values,
                                     size_t rows,
                                     size_t cols,
                                     const double *outcome,
                                     struct ExomixDataset **out);

/**
 * Draw the two-component benchmark mixture (three coordinates plus an
 * outcome with true slope `slope`).
 *
 * # Safety
 * `out` must be a valid location for a handle; release it with
 * [`exomix_dataset_free`].
 */
enum ExomixStatus exomix_dataset_simulate_mixture(uint64_t seed,
                                                  size_t rows,
                                                  double exogenous_share,
                                                  double slope,
                                                  struct ExomixDataset **out);

/**
 * # Safety
 * `dataset` must be a handle from this library, not yet freed.
 */
void exomix_dataset_free(struct ExomixDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle from this library.
 */
size_t exomix_dataset_rows(const struct ExomixDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle from this library.
 */
size_t exomix_dataset_cols(const struct ExomixDataset *dataset);

/**
 * Fit an m-component mixture.
 *
 * # Safety
 * `dataset` must be a live handle; `options` may be NULL for defaults; the
 * returned fit must be released with [`exomix_fit_free`].
 */
enum ExomixStatus exomix_fit(const struct ExomixDataset *dataset,
                             size_t components,
                             const struct ExomixFitOptions *options,
                             struct ExomixFit **out);

/**
 * # Safety
 * `fit` must be a handle from this library, not yet freed.
 */
void exomix_fit_free(struct ExomixFit *fit);

/**
 * # Safety
 * `fit` must be a live handle from this library.
 */
size_t exomix_fit_components(const struct ExomixFit *fit);

/**
 * Copy the component weights (ascending) into `out`.
 *
 * # Safety
 * `out` must point to `exomix_fit_components(fit)` doubles.
 */
enum ExomixStatus exomix_fit_weights(const struct ExomixFit *fit, double *out);

/**
 * Copy the posterior matrix (rows x components, row-major) into `out`.
 *
 * # Safety
 * `out` must point to `rows * components` doubles.
 */
enum ExomixStatus exomix_fit_posteriors(const struct ExomixFit *fit, double *out);

/**
 * Posterior of a new coordinate vector under the frozen fit.
 *
 * # Safety
 * `row` must point to `len` doubles and `out` to
 * `exomix_fit_components(fit)` doubles.
 */
enum ExomixStatus exomix_fit_posterior_of(const struct ExomixFit *fit,
                                          const double *row,
                                          size_t len,
                                          double *out);

/**
 * Run the full two-component pipeline: fit, label by the mean of
 * `moment_coordinate` (the higher-mean component is the selection target),
 * select rows with target posterior at or above `threshold`, and regress
 * the outcome on that coordinate over the subset. A nonzero
 * `bootstrap_replicates` re-runs everything per resample for the slope's
 * standard error.
 *
 * # Safety
 * `dataset` must be a live handle carrying an outcome column; `options` may
 * be NULL for defaults; `out` must be a valid result location.
 */
enum ExomixStatus exomix_pipeline_two_component(const struct ExomixDataset *dataset,
                                                const struct ExomixFitOptions *options,
                                                size_t moment_coordinate,
                                                double threshold,
                                                size_t bootstrap_replicates,
                                                struct ExomixPipelineResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXOMIX_H */
