//! C ABI over the exomix pipeline: opaque handles, status codes, and a
//! one-shot two-component pipeline call for host languages that just want
//! the subset slope.
//!
//! Every function returns an [`ExomixStatus`]; on failure a thread-local
//! message is available through [`exomix_last_error_message`]. Panics are
//! caught at the boundary and reported as estimation errors.

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};

use libc::{c_char, size_t};

use exomix::error::Error;
use exomix::labeling::{label_components, select_subset, Label, LabelRule};
use exomix::npem::{npem_fit, posterior_of, DataMatrix, FitOptions, MixtureFit};
use exomix::regress::{bootstrap_pipeline, ols_on_subset, BootstrapConfig, PipelineConfig};
use exomix::simgen::{simulate_mixture, MixtureSimConfig};

/// Outcome of a call across the ABI.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExomixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    EstimationError = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message.into_bytes());
}

fn status_of(err: &Error) -> ExomixStatus {
    match err.exit_code() {
        2 => ExomixStatus::InvalidArgument,
        3 => ExomixStatus::DataError,
        _ => ExomixStatus::EstimationError,
    }
}

fn fail(err: Error) -> ExomixStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Copy the last error message into `buffer` (NUL-terminated, truncated to
/// `capacity`); returns the full message length in bytes. A zero `capacity`
/// just queries the length.
///
/// # Safety
/// `buffer`, when non-NULL, must point to at least `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn exomix_last_error_message(
    buffer: *mut c_char,
    capacity: size_t,
) -> size_t {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        if !buffer.is_null() && capacity > 0 {
            let n = message.len().min(capacity - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(message.as_ptr(), buffer as *mut u8, n);
                *buffer.add(n) = 0;
            }
        }
        message.len()
    })
}

/// Observations (rows x cols coordinates) plus an optional outcome column.
pub struct ExomixDataset {
    data: DataMatrix,
    outcome: Option<Vec<f64>>,
}

/// A fitted mixture.
pub struct ExomixFit {
    fit: MixtureFit,
}

/// Estimation settings; see `exomix_fit_options_default` for the defaults.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct ExomixFitOptions {
    pub max_iterations: size_t,
    pub tolerance: f64,
    pub restarts: size_t,
    pub seed: u64,
    /// 0 evaluates densities exactly; otherwise the linear-binned grid size
    /// (at least 64).
    pub density_grid: size_t,
    /// Nonzero re-derives per-component bandwidths each iteration.
    pub adaptive_bandwidth: i32,
    /// A positive value fixes the kernel bandwidth; otherwise it is derived
    /// from the pooled sample.
    pub fixed_bandwidth: f64,
}

impl ExomixFitOptions {
    fn to_options(self) -> FitOptions {
        FitOptions {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            restarts: self.restarts,
            seed: self.seed,
            bandwidth_rule: if self.fixed_bandwidth > 0.0 {
                exomix::kde::BandwidthRule::Fixed(self.fixed_bandwidth)
            } else {
                exomix::kde::BandwidthRule::Silverman
            },
            density_grid: (self.density_grid > 0).then_some(self.density_grid),
            adaptive_bandwidth: self.adaptive_bandwidth != 0,
            ..FitOptions::default()
        }
    }
}

/// Fill `options` with the library defaults.
///
/// # Safety
/// `options` must be a valid location for one `ExomixFitOptions`.
#[no_mangle]
pub unsafe extern "C" fn exomix_fit_options_default(
    options: *mut ExomixFitOptions,
) -> ExomixStatus {
    if options.is_null() {
        return ExomixStatus::NullPointer;
    }
    let defaults = FitOptions::default();
    unsafe {
        *options = ExomixFitOptions {
            max_iterations: defaults.max_iterations,
            tolerance: defaults.tolerance,
            restarts: defaults.restarts,
            seed: defaults.seed,
            density_grid: 0,
            adaptive_bandwidth: 0,
            fixed_bandwidth: 0.0,
        };
    }
    ExomixStatus::Ok
}

/// Build a dataset from a row-major `rows x cols` array; `outcome` may be
/// NULL or point to `rows` values.
///
/// # Safety
/// `values` must point to `rows * cols` doubles and `outcome`, when non-NULL,
/// to `rows` doubles. The returned handle must be released with
/// [`exomix_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn exomix_dataset_new(
    values: *const f64,
    rows: size_t,
    cols: size_t,
    outcome: *const f64,
    out: *mut *mut ExomixDataset,
) -> ExomixStatus {
    if values.is_null() || out.is_null() {
        return ExomixStatus::NullPointer;
    }
    let flat = std::slice::from_raw_parts(values, rows * cols).to_vec();
    let data = match DataMatrix::new(rows, cols, flat) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let outcome = if outcome.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(outcome, rows).to_vec())
    };
    *out = Box::into_raw(Box::new(ExomixDataset { data, outcome }));
    ExomixStatus::Ok
}

/// Draw the two-component benchmark mixture (three coordinates plus an
/// outcome with true slope `slope`).
///
/// # Safety
/// `out` must be a valid location for a handle; release it with
/// [`exomix_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn exomix_dataset_simulate_mixture(
    seed: u64,
    rows: size_t,
    exogenous_share: f64,
    slope: f64,
    out: *mut *mut ExomixDataset,
) -> ExomixStatus {
    if out.is_null() {
        return ExomixStatus::NullPointer;
    }
    match simulate_mixture(&MixtureSimConfig {
        t: rows,
        pi: exogenous_share,
        beta: slope,
        seed,
    }) {
        Ok(sim) => {
            *out = Box::into_raw(Box::new(ExomixDataset {
                data: sim.data,
                outcome: Some(sim.outcome),
            }));
            ExomixStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `dataset` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn exomix_dataset_free(dataset: *mut ExomixDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn exomix_dataset_rows(dataset: *const ExomixDataset) -> size_t {
    dataset.as_ref().map_or(0, |d| d.data.nrows())
}

/// # Safety
/// `dataset` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn exomix_dataset_cols(dataset: *const ExomixDataset) -> size_t {
    dataset.as_ref().map_or(0, |d| d.data.ncols())
}

/// Fit an m-component mixture.
///
/// # Safety
/// `dataset` must be a live handle; `options` may be NULL for defaults; the
/// returned fit must be released with [`exomix_fit_free`].
#[no_mangle]
pub unsafe extern "C" fn exomix_fit(
    dataset: *const ExomixDataset,
    components: size_t,
    options: *const ExomixFitOptions,
    out: *mut *mut ExomixFit,
) -> ExomixStatus {
    let Some(dataset) = dataset.as_ref() else {
        return ExomixStatus::NullPointer;
    };
    if out.is_null() {
        return ExomixStatus::NullPointer;
    }
    let fit_options = if options.is_null() {
        FitOptions::default()
    } else {
        (*options).to_options()
    };
    let result = catch_unwind(AssertUnwindSafe(|| {
        npem_fit(&dataset.data, components, &fit_options)
    }));
    match result {
        Ok(Ok(fit)) => {
            *out = Box::into_raw(Box::new(ExomixFit { fit }));
            ExomixStatus::Ok
        }
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("estimation panicked".into());
            ExomixStatus::EstimationError
        }
    }
}

/// # Safety
/// `fit` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn exomix_fit_free(fit: *mut ExomixFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// # Safety
/// `fit` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn exomix_fit_components(fit: *const ExomixFit) -> size_t {
    fit.as_ref().map_or(0, |f| f.fit.n_components())
}

/// Copy the component weights (ascending) into `out`.
///
/// # Safety
/// `out` must point to `exomix_fit_components(fit)` doubles.
#[no_mangle]
pub unsafe extern "C" fn exomix_fit_weights(
    fit: *const ExomixFit,
    out: *mut f64,
) -> ExomixStatus {
    let Some(fit) = fit.as_ref() else {
        return ExomixStatus::NullPointer;
    };
    if out.is_null() {
        return ExomixStatus::NullPointer;
    }
    std::ptr::copy_nonoverlapping(fit.fit.weights().as_ptr(), out, fit.fit.n_components());
    ExomixStatus::Ok
}

/// Copy the posterior matrix (rows x components, row-major) into `out`.
///
/// # Safety
/// `out` must point to `rows * components` doubles.
#[no_mangle]
pub unsafe extern "C" fn exomix_fit_posteriors(
    fit: *const ExomixFit,
    out: *mut f64,
) -> ExomixStatus {
    let Some(fit) = fit.as_ref() else {
        return ExomixStatus::NullPointer;
    };
    if out.is_null() {
        return ExomixStatus::NullPointer;
    }
    let m = fit.fit.n_components();
    for i in 0..fit.fit.n_rows() {
        std::ptr::copy_nonoverlapping(fit.fit.posterior_row(i).as_ptr(), out.add(i * m), m);
    }
    ExomixStatus::Ok
}

/// Posterior of a new coordinate vector under the frozen fit.
///
/// # Safety
/// `row` must point to `len` doubles and `out` to
/// `exomix_fit_components(fit)` doubles.
#[no_mangle]
pub unsafe extern "C" fn exomix_fit_posterior_of(
    fit: *const ExomixFit,
    row: *const f64,
    len: size_t,
    out: *mut f64,
) -> ExomixStatus {
    let Some(fit) = fit.as_ref() else {
        return ExomixStatus::NullPointer;
    };
    if row.is_null() || out.is_null() {
        return ExomixStatus::NullPointer;
    }
    let row = std::slice::from_raw_parts(row, len);
    let result = catch_unwind(AssertUnwindSafe(|| posterior_of(&fit.fit, row)));
    match result {
        Ok(Ok(posterior)) => {
            std::ptr::copy_nonoverlapping(posterior.as_ptr(), out, posterior.len());
            ExomixStatus::Ok
        }
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("posterior evaluation panicked".into());
            ExomixStatus::EstimationError
        }
    }
}

/// Second-stage results of the one-shot pipeline.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct ExomixPipelineResult {
    pub intercept: f64,
    pub slope: f64,
    /// Classical standard error of the subset slope.
    pub slope_se: f64,
    pub r_squared: f64,
    pub n_selected: size_t,
    /// Bootstrap fields are zero unless replicates were requested.
    pub bootstrap_se: f64,
    pub interval_low: f64,
    pub interval_high: f64,
    pub replicates_used: size_t,
    pub replicates_failed: size_t,
}

/// Run the full two-component pipeline: fit, label by the mean of
/// `moment_coordinate` (the higher-mean component is the selection target),
/// select rows with target posterior at or above `threshold`, and regress
/// the outcome on that coordinate over the subset. A nonzero
/// `bootstrap_replicates` re-runs everything per resample for the slope's
/// standard error.
///
/// # Safety
/// `dataset` must be a live handle carrying an outcome column; `options` may
/// be NULL for defaults; `out` must be a valid result location.
#[no_mangle]
pub unsafe extern "C" fn exomix_pipeline_two_component(
    dataset: *const ExomixDataset,
    options: *const ExomixFitOptions,
    moment_coordinate: size_t,
    threshold: f64,
    bootstrap_replicates: size_t,
    out: *mut ExomixPipelineResult,
) -> ExomixStatus {
    let Some(dataset) = dataset.as_ref() else {
        return ExomixStatus::NullPointer;
    };
    if out.is_null() {
        return ExomixStatus::NullPointer;
    }
    let Some(outcome) = dataset.outcome.as_ref() else {
        set_error("dataset has no outcome column".into());
        return ExomixStatus::InvalidArgument;
    };
    let fit_options = if options.is_null() {
        FitOptions::default()
    } else {
        (*options).to_options()
    };
    let target = Label::new("target");
    let config = PipelineConfig {
        components: 2,
        fit: fit_options,
        rule: LabelRule::MomentOrder {
            coordinates: vec![moment_coordinate],
            ordering: vec![target.clone(), Label::new("other")],
        },
        target,
        threshold,
        regressor_coordinate: moment_coordinate,
    };

    let run = catch_unwind(AssertUnwindSafe(|| -> Result<_, Error> {
        let fit = npem_fit(&dataset.data, config.components, &config.fit)?;
        let labels = label_components(&fit, &config.rule)?;
        let selection = select_subset(&fit, &labels, &config.target, config.threshold)?;
        let x = dataset.data.column(config.regressor_coordinate);
        let regression = ols_on_subset(outcome, &x, &selection, true)?;
        let bootstrap = if bootstrap_replicates > 0 {
            Some(bootstrap_pipeline(
                &dataset.data,
                outcome,
                &BootstrapConfig {
                    pipeline: config.clone(),
                    replicates: bootstrap_replicates,
                    seed: config.fit.seed,
                },
            )?)
        } else {
            None
        };
        Ok((selection.len(), regression, bootstrap))
    }));

    match run {
        Ok(Ok((n_selected, regression, bootstrap))) => {
            let result = ExomixPipelineResult {
                intercept: regression.coefficient("intercept").unwrap_or(f64::NAN),
                slope: regression.coefficient("x").unwrap_or(f64::NAN),
                slope_se: regression.std_error("x").unwrap_or(f64::NAN),
                r_squared: regression.r_squared,
                n_selected,
                bootstrap_se: bootstrap.as_ref().map_or(0.0, |b| b.se),
                interval_low: bootstrap.as_ref().map_or(0.0, |b| b.interval.0),
                interval_high: bootstrap.as_ref().map_or(0.0, |b| b.interval.1),
                replicates_used: bootstrap.as_ref().map_or(0, |b| b.replicates_used),
                replicates_failed: bootstrap.as_ref().map_or(0, |b| b.replicates_failed),
            };
            *out = result;
            ExomixStatus::Ok
        }
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("pipeline panicked".into());
            ExomixStatus::EstimationError
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping_follows_error_categories() {
        assert_eq!(
            status_of(&Error::InvalidOptions("x".into())),
            ExomixStatus::InvalidArgument
        );
        assert_eq!(
            status_of(&Error::SchemaMismatch { column: "x".into() }),
            ExomixStatus::DataError
        );
        assert_eq!(
            status_of(&Error::DegenerateRegressor),
            ExomixStatus::EstimationError
        );
    }
}
