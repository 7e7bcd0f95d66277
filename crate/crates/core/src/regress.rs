//! Second-stage estimation: OLS on selected subsets, full-pipeline bootstrap
//! inference, and the fixed-effects difference-in-difference regression with
//! store-clustered standard errors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{self, ComponentLabels, Label, LabelRule, SelectionResult};
use crate::npem::{self, DataMatrix, FitOptions, MixtureFit};
use crate::panel::PanelTable;
use crate::rng::{self, domain};

/// Progress of demeaning sweeps is measured in the sup norm against this.
const DEMEAN_TOLERANCE: f64 = 1e-10;
const MAX_DEMEAN_SWEEPS: usize = 10_000;

/// How the reported standard errors were computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SeKind {
    Classical,
    Cluster { key: String, groups: usize },
    Bootstrap { replicates: usize },
}

/// One estimated coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

/// Output of any regression in this module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub terms: Vec<Term>,
    pub se_kind: SeKind,
    pub r_squared: f64,
    pub n_used: usize,
    pub residuals: Vec<f64>,
}

impl RegressionResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.estimate)
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.terms
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.std_error)
    }

    /// Rename a term, e.g. "x" to the source column name for reports.
    pub fn with_term_name(mut self, old: &str, new: &str) -> Self {
        for term in &mut self.terms {
            if term.name == old {
                term.name = new.to_string();
            }
        }
        self
    }
}

/// Least squares of y on a single regressor, optionally with an intercept.
///
/// Standard errors are classical. With exactly as many observations as
/// parameters the fit is an interpolation and the standard errors are NaN.
pub fn ols(y: &[f64], x: &[f64], intercept: bool) -> Result<RegressionResult> {
    if y.len() != x.len() {
        return Err(Error::LengthMismatch {
            left_name: "y",
            left: y.len(),
            right_name: "x",
            right: x.len(),
        });
    }
    let n = y.len();
    let k = if intercept { 2 } else { 1 };
    if n < k {
        return Err(Error::InsufficientData { needed: k, got: n });
    }
    let nf = n as f64;

    let (alpha, beta, sxx) = if intercept {
        let x_mean = x.iter().sum::<f64>() / nf;
        let y_mean = y.iter().sum::<f64>() / nf;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for i in 0..n {
            let dx = x[i] - x_mean;
            sxx += dx * dx;
            sxy += dx * (y[i] - y_mean);
        }
        if sxx <= 0.0 {
            return Err(Error::DegenerateRegressor);
        }
        let beta = sxy / sxx;
        (Some(y_mean - beta * x_mean), beta, sxx)
    } else {
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        if sxx <= 0.0 {
            return Err(Error::DegenerateRegressor);
        }
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        (None, sxy / sxx, sxx)
    };

    let residuals: Vec<f64> = y
        .iter()
        .zip(x)
        .map(|(yi, xi)| yi - (alpha.unwrap_or(0.0) + beta * xi))
        .collect();
    let rss: f64 = residuals.iter().map(|e| e * e).sum();

    let (r_squared, sigma2) = if intercept {
        let y_mean = y.iter().sum::<f64>() / nf;
        let tss: f64 = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum();
        let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
        (r2, rss / (nf - 2.0))
    } else {
        let tss: f64 = y.iter().map(|v| v * v).sum();
        let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
        (r2, rss / (nf - 1.0))
    };

    let beta_se = (sigma2 / sxx).sqrt();
    let mut terms = Vec::with_capacity(k);
    if let Some(a) = alpha {
        let x_mean = x.iter().sum::<f64>() / nf;
        let alpha_se = (sigma2 * (1.0 / nf + x_mean * x_mean / sxx)).sqrt();
        terms.push(Term {
            name: "intercept".into(),
            estimate: a,
            std_error: alpha_se,
        });
    }
    terms.push(Term {
        name: "x".into(),
        estimate: beta,
        std_error: beta_se,
    });

    Ok(RegressionResult {
        terms,
        se_kind: SeKind::Classical,
        r_squared,
        n_used: n,
        residuals,
    })
}

/// OLS restricted to the rows of a selection.
pub fn ols_on_subset(
    y: &[f64],
    x: &[f64],
    selection: &SelectionResult,
    intercept: bool,
) -> Result<RegressionResult> {
    if selection.is_empty() {
        return Err(Error::EmptySelection {
            threshold: selection.threshold,
        });
    }
    if let Some(&max) = selection.indices.iter().max() {
        if max >= y.len() {
            return Err(Error::InvalidOptions(format!(
                "selection index {max} out of range for {} rows",
                y.len()
            )));
        }
    }
    let ys: Vec<f64> = selection.indices.iter().map(|&i| y[i]).collect();
    let xs: Vec<f64> = selection.indices.iter().map(|&i| x[i]).collect();
    ols(&ys, &xs, intercept)
}

/// Settings for one estimate-label-select-regress pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub components: usize,
    pub fit: FitOptions,
    pub rule: LabelRule,
    pub target: Label,
    pub threshold: f64,
    /// Which data coordinate is the regressor of interest.
    pub regressor_coordinate: usize,
}

/// Everything produced by one pipeline pass.
#[derive(Debug)]
pub struct PipelineRun {
    pub fit: MixtureFit,
    pub labels: ComponentLabels,
    pub selection: SelectionResult,
    pub regression: RegressionResult,
}

/// Fit the mixture, label it, select the target subset, and regress y on the
/// chosen coordinate over that subset.
pub fn run_pipeline(data: &DataMatrix, y: &[f64], config: &PipelineConfig) -> Result<PipelineRun> {
    if y.len() != data.nrows() {
        return Err(Error::LengthMismatch {
            left_name: "y",
            left: y.len(),
            right_name: "data rows",
            right: data.nrows(),
        });
    }
    if config.regressor_coordinate >= data.ncols() {
        return Err(Error::InvalidOptions(format!(
            "regressor coordinate {} out of range",
            config.regressor_coordinate
        )));
    }
    let fit = npem::npem_fit(data, config.components, &config.fit)?;
    let labels = labeling::label_components(&fit, &config.rule)?;
    let selection = labeling::select_subset(&fit, &labels, &config.target, config.threshold)?;
    let x = data.column(config.regressor_coordinate);
    let regression = ols_on_subset(y, &x, &selection, true)?;
    Ok(PipelineRun {
        fit,
        labels,
        selection,
        regression,
    })
}

/// Bootstrap settings: resampling plus the pipeline to re-run per replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub pipeline: PipelineConfig,
    pub replicates: usize,
    pub seed: u64,
}

/// Full-pipeline bootstrap summary for the slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Slope on the original data.
    pub point_estimate: f64,
    /// Standard deviation of the replicate slopes.
    pub se: f64,
    /// 2.5% and 97.5% replicate quantiles.
    pub interval: (f64, f64),
    pub replicates_used: usize,
    pub replicates_failed: usize,
    /// Replicate slopes, failures dropped, in replicate order.
    pub replicate_betas: Vec<f64>,
}

/// Resample rows with replacement and re-run the entire pipeline per
/// replicate, so the standard error reflects subset-selection uncertainty.
///
/// Replicates that fail to label or select are dropped and counted; more than
/// 20% failures aborts. Each replicate draws from its own seed-derived
/// stream, so results do not depend on scheduling or on the total replicate
/// count.
pub fn bootstrap_pipeline(
    data: &DataMatrix,
    y: &[f64],
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if config.replicates < 50 {
        return Err(Error::InvalidOptions(
            "bootstrap needs at least 50 replicates".into(),
        ));
    }
    let base = run_pipeline(data, y, &config.pipeline)?;
    let point_estimate = base
        .regression
        .coefficient("x")
        .expect("slope present in pipeline regression");

    let n = data.nrows();
    let outcomes: Vec<Option<f64>> = (0..config.replicates)
        .into_par_iter()
        .map(|b| {
            use rand::Rng;
            let mut rng = rng::stream_rng(config.seed, domain::BOOTSTRAP, b as u64);
            let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = data
                .select_rows(&indices)
                .expect("indices are in range by construction");
            let y_res: Vec<f64> = indices.iter().map(|&i| y[i]).collect();
            let mut replicate_cfg = config.pipeline.clone();
            replicate_cfg.fit.seed = rng::derive_seed(config.seed, b as u64);
            run_pipeline(&resampled, &y_res, &replicate_cfg)
                .ok()
                .and_then(|run| run.regression.coefficient("x"))
        })
        .collect();

    let replicate_betas: Vec<f64> = outcomes.iter().filter_map(|o| *o).collect();
    let failed = config.replicates - replicate_betas.len();
    if failed as f64 > 0.2 * config.replicates as f64 {
        return Err(Error::TooManyFailedReplicates {
            failed,
            total: config.replicates,
        });
    }

    let used = replicate_betas.len();
    let mean = replicate_betas.iter().sum::<f64>() / used as f64;
    let var = replicate_betas
        .iter()
        .map(|b| (b - mean) * (b - mean))
        .sum::<f64>()
        / (used as f64 - 1.0);
    let se = var.sqrt();

    let mut sorted = replicate_betas.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let interval = (
        crate::kde::quantile_sorted(&sorted, 0.025),
        crate::kde::quantile_sorted(&sorted, 0.975),
    );

    Ok(BootstrapResult {
        point_estimate,
        se,
        interval,
        replicates_used: used,
        replicates_failed: failed,
        replicate_betas,
    })
}

/// A column-addressable table for fixed-effects regression.
#[derive(Debug, Clone, Default)]
pub struct FeTable {
    n: Option<usize>,
    numeric: Vec<(String, Vec<f64>)>,
    categorical: Vec<(String, Vec<String>)>,
}

impl FeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.n.unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_len(&mut self, name: &str, len: usize) -> Result<()> {
        match self.n {
            None => {
                self.n = Some(len);
                Ok(())
            }
            Some(n) if n == len => Ok(()),
            Some(n) => Err(Error::InvalidOptions(format!(
                "column {name} has {len} rows, table has {n}"
            ))),
        }
    }

    pub fn add_numeric(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        self.check_len(&name, values.len())?;
        self.numeric.push((name, values));
        Ok(())
    }

    pub fn add_categorical(&mut self, name: impl Into<String>, values: Vec<String>) -> Result<()> {
        let name = name.into();
        self.check_len(&name, values.len())?;
        self.categorical.push((name, values));
        Ok(())
    }

    pub fn numeric(&self, name: &str) -> Option<&[f64]> {
        self.numeric
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn categorical(&self, name: &str) -> Option<&[String]> {
        self.categorical
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// Names of the columns entering the difference-in-difference specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeSpec {
    pub outcome: String,
    pub regressor: String,
    pub fixed_effects: Vec<String>,
    pub cluster: String,
}

impl FeSpec {
    fn validate(&self) -> Result<()> {
        // The cluster key may coincide with a fixed effect (e.g. store), but
        // outcome, regressor and the effects must be mutually distinct.
        let mut names = vec![&self.outcome, &self.regressor];
        names.extend(self.fixed_effects.iter());
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                if a == b {
                    return Err(Error::InvalidOptions(format!(
                        "column {a} appears twice in the specification"
                    )));
                }
            }
        }
        if self.cluster == self.outcome || self.cluster == self.regressor {
            return Err(Error::InvalidOptions(
                "cluster key cannot be the outcome or regressor".into(),
            ));
        }
        if self.fixed_effects.is_empty() {
            return Err(Error::InvalidOptions(
                "at least one fixed effect is required".into(),
            ));
        }
        Ok(())
    }
}

/// Dense level codes for one categorical column.
fn encode_levels(values: &[String]) -> (Vec<usize>, usize) {
    let mut level_of = BTreeMap::new();
    for v in values {
        let next = level_of.len();
        level_of.entry(v.clone()).or_insert(next);
    }
    let codes = values.iter().map(|v| level_of[v]).collect();
    (codes, level_of.len())
}

/// Subtract group means in place for one fixed-effect dimension; returns the
/// largest absolute adjustment applied.
fn demean_once(values: &mut [f64], codes: &[usize], n_levels: usize) -> f64 {
    let mut sums = vec![0.0f64; n_levels];
    let mut counts = vec![0usize; n_levels];
    for (v, &c) in values.iter().zip(codes) {
        sums[c] += *v;
        counts[c] += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut max_change = 0.0f64;
    for (v, &c) in values.iter_mut().zip(codes) {
        let m = means[c];
        *v -= m;
        max_change = max_change.max(m.abs());
    }
    max_change
}

/// Estimate the difference-in-difference slope by alternating within-group
/// demeaning of the outcome and regressor over every fixed-effect dimension,
/// then OLS without intercept on the demeaned columns. Standard errors are
/// cluster-robust with the small-cluster correction G/(G-1)*(n-1)/(n-k).
pub fn fe_regression(table: &FeTable, spec: &FeSpec) -> Result<RegressionResult> {
    spec.validate()?;
    let outcome = table
        .numeric(&spec.outcome)
        .ok_or_else(|| Error::SchemaMismatch {
            column: spec.outcome.clone(),
        })?;
    let regressor = table
        .numeric(&spec.regressor)
        .ok_or_else(|| Error::SchemaMismatch {
            column: spec.regressor.clone(),
        })?;
    let cluster = table
        .categorical(&spec.cluster)
        .ok_or_else(|| Error::SchemaMismatch {
            column: spec.cluster.clone(),
        })?;
    let n = outcome.len();

    let mut fe_codes = Vec::new();
    let mut absorbed = 0usize;
    for fe in &spec.fixed_effects {
        let col = table
            .categorical(fe)
            .ok_or_else(|| Error::SchemaMismatch { column: fe.clone() })?;
        let (codes, levels) = encode_levels(col);
        if levels < 2 {
            return Err(Error::InvalidOptions(format!(
                "fixed effect {fe} has a single level"
            )));
        }
        absorbed += levels - 1;
        fe_codes.push((codes, levels));
    }

    let mut y = outcome.to_vec();
    let mut x = regressor.to_vec();
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        if sweeps > MAX_DEMEAN_SWEEPS {
            return Err(Error::NoConvergence {
                context: "fixed-effect demeaning",
                sweeps: MAX_DEMEAN_SWEEPS,
            });
        }
        let mut max_change = 0.0f64;
        for (codes, levels) in &fe_codes {
            max_change = max_change.max(demean_once(&mut y, codes, *levels));
            max_change = max_change.max(demean_once(&mut x, codes, *levels));
        }
        if max_change < DEMEAN_TOLERANCE {
            break;
        }
    }

    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let raw_mean = regressor.iter().sum::<f64>() / n as f64;
    let raw_sxx: f64 = regressor.iter().map(|v| (v - raw_mean) * (v - raw_mean)).sum();
    if sxx <= 1e-12 * raw_sxx.max(f64::EPSILON) {
        return Err(Error::CollinearFixedEffects);
    }

    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let beta = sxy / sxx;
    let residuals: Vec<f64> = y.iter().zip(&x).map(|(yi, xi)| yi - beta * xi).collect();

    // Cluster-robust sandwich for a single demeaned regressor.
    let (cluster_codes, n_clusters) = encode_levels(cluster);
    if n_clusters < 2 {
        return Err(Error::InvalidOptions(
            "cluster column has a single level".into(),
        ));
    }
    let mut scores = vec![0.0f64; n_clusters];
    for i in 0..n {
        scores[cluster_codes[i]] += x[i] * residuals[i];
    }
    let meat: f64 = scores.iter().map(|s| s * s).sum();
    // Parameters: slope, the overall mean, and the absorbed dummies.
    let k = 2 + absorbed;
    if n <= k {
        return Err(Error::InsufficientData { needed: k + 1, got: n });
    }
    let g = n_clusters as f64;
    let nf = n as f64;
    let correction = g / (g - 1.0) * (nf - 1.0) / (nf - k as f64);
    let var = correction * meat / (sxx * sxx);
    let se = var.sqrt();

    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let tss: f64 = y.iter().map(|v| v * v).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };

    Ok(RegressionResult {
        terms: vec![Term {
            name: spec.regressor.clone(),
            estimate: beta,
            std_error: se,
        }],
        se_kind: SeKind::Cluster {
            key: spec.cluster.clone(),
            groups: n_clusters,
        },
        r_squared,
        n_used: n,
        residuals,
    })
}

/// Labels addressed by (category, store, week).
pub type StoreWeekLabels = BTreeMap<(String, String, i64), Label>;

/// Mean percent log-price change for each treatment regime in one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPriceChange {
    pub category: String,
    /// regime -> (mean change in log points x 100, number of qualifying windows)
    pub changes: Vec<(Label, Option<f64>, usize)>,
}

/// Price-change recovery across categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceChangeReport {
    pub window: usize,
    pub categories: Vec<CategoryPriceChange>,
}

/// One qualifying control-then-treatment window within a store.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentWindow {
    pub category: String,
    pub store: String,
    pub regime: Label,
    /// First week of the control half; the window spans 2*window consecutive weeks.
    pub start_week: i64,
    pub window: usize,
}

impl ExperimentWindow {
    pub fn control_weeks(&self) -> Vec<i64> {
        (0..self.window as i64).map(|d| self.start_week + d).collect()
    }

    pub fn treatment_weeks(&self) -> Vec<i64> {
        (0..self.window as i64)
            .map(|d| self.start_week + self.window as i64 + d)
            .collect()
    }

    pub fn all_weeks(&self) -> Vec<i64> {
        (0..2 * self.window as i64)
            .map(|d| self.start_week + d)
            .collect()
    }
}

/// Weekly mean log price per (category, store, week), averaged over products.
fn weekly_mean_log_prices(panel: &PanelTable) -> BTreeMap<(String, String, i64), f64> {
    let mut sums: BTreeMap<(String, String, i64), (f64, usize)> = BTreeMap::new();
    for row in panel.rows() {
        let key = (row.category.clone(), row.store.clone(), row.week);
        let entry = sums.entry(key).or_insert((0.0, 0));
        entry.0 += row.price.ln();
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (s, c))| (k, s / c as f64))
        .collect()
}

/// Find every run of `window` consecutive control weeks followed by `window`
/// consecutive weeks under one treatment regime, per (category, store).
pub fn find_experiment_windows(
    labels: &StoreWeekLabels,
    window: usize,
    control: &Label,
) -> Vec<ExperimentWindow> {
    let mut by_store: BTreeMap<(String, String), Vec<(i64, &Label)>> = BTreeMap::new();
    for ((category, store, week), label) in labels {
        by_store
            .entry((category.clone(), store.clone()))
            .or_default()
            .push((*week, label));
    }
    let mut found = Vec::new();
    for ((category, store), mut weeks) in by_store {
        weeks.sort_by_key(|(w, _)| *w);
        let span = 2 * window;
        if weeks.len() < span {
            continue;
        }
        for start in 0..=weeks.len() - span {
            let slice = &weeks[start..start + span];
            // Strictly consecutive weeks.
            if !slice.windows(2).all(|p| p[1].0 == p[0].0 + 1) {
                continue;
            }
            if !slice[..window].iter().all(|(_, l)| *l == control) {
                continue;
            }
            let regime = slice[window].1;
            if regime == control {
                continue;
            }
            if !slice[window..].iter().all(|(_, l)| *l == regime) {
                continue;
            }
            found.push(ExperimentWindow {
                category: category.clone(),
                store: store.clone(),
                regime: regime.clone(),
                start_week: slice[0].0,
                window,
            });
        }
    }
    found
}

/// Average log-price change (in percent) from control windows to treatment
/// windows, per category and regime. Categories with no qualifying window
/// for a regime report a missing value.
pub fn price_change_report(
    panel: &PanelTable,
    labels: &StoreWeekLabels,
    window: usize,
    control: &Label,
) -> Result<PriceChangeReport> {
    if window < 1 {
        return Err(Error::InvalidOptions("window must be >= 1".into()));
    }
    let weekly = weekly_mean_log_prices(panel);
    let windows = find_experiment_windows(labels, window, control);

    let mut categories: Vec<String> = panel
        .rows()
        .iter()
        .map(|r| r.category.clone())
        .collect();
    categories.sort();
    categories.dedup();

    let mut regimes: Vec<Label> = labels
        .values()
        .filter(|l| *l != control)
        .cloned()
        .collect();
    regimes.sort();
    regimes.dedup();

    let mut report = Vec::new();
    for category in categories {
        let mut changes = Vec::new();
        for regime in &regimes {
            let mut deltas = Vec::new();
            for w in windows
                .iter()
                .filter(|w| w.category == category && &w.regime == regime)
            {
                let mean_over = |weeks: &[i64]| -> Option<f64> {
                    let vals: Vec<f64> = weeks
                        .iter()
                        .filter_map(|&wk| {
                            weekly
                                .get(&(category.clone(), w.store.clone(), wk))
                                .copied()
                        })
                        .collect();
                    if vals.len() == weeks.len() {
                        Some(vals.iter().sum::<f64>() / vals.len() as f64)
                    } else {
                        None
                    }
                };
                if let (Some(treat), Some(ctrl)) = (
                    mean_over(&w.treatment_weeks()),
                    mean_over(&w.control_weeks()),
                ) {
                    deltas.push(treat - ctrl);
                }
            }
            let mean = if deltas.is_empty() {
                None
            } else {
                Some(100.0 * deltas.iter().sum::<f64>() / deltas.len() as f64)
            };
            changes.push((regime.clone(), mean, deltas.len()));
        }
        report.push(CategoryPriceChange { category, changes });
    }
    Ok(PriceChangeReport {
        window,
        categories: report,
    })
}

/// The matched-pair two-period table for one category.
#[derive(Debug)]
pub struct CategoryDid {
    pub category: String,
    pub table: FeTable,
    pub n_pairs: usize,
    /// Experiment stores with no all-control match over their window.
    pub unmatched: Vec<String>,
}

/// Build the difference-in-difference panels: find each store's first
/// experiment window, match it to a store that spent the same weeks entirely
/// under control pricing, and average each product over the control and
/// treatment halves to two observations per product-store pair.
pub fn assemble_did_tables(
    panel: &PanelTable,
    labels: &StoreWeekLabels,
    window: usize,
    control: &Label,
) -> Result<Vec<CategoryDid>> {
    let windows = find_experiment_windows(labels, window, control);

    // First window per (category, store).
    let mut first_window: BTreeMap<(String, String), ExperimentWindow> = BTreeMap::new();
    for w in windows {
        first_window
            .entry((w.category.clone(), w.store.clone()))
            .or_insert(w);
    }

    let mut categories: Vec<String> = panel.rows().iter().map(|r| r.category.clone()).collect();
    categories.sort();
    categories.dedup();

    // (category, store, week, product) -> (ln price, ln quantity if positive)
    type CellKey<'a> = (&'a str, &'a str, i64, &'a str);
    let mut cell: BTreeMap<CellKey, (f64, Option<f64>)> = BTreeMap::new();
    for row in panel.rows() {
        let q = if row.quantity > 0.0 {
            Some(row.quantity.ln())
        } else {
            None
        };
        cell.insert(
            (&row.category, &row.store, row.week, &row.product),
            (row.price.ln(), q),
        );
    }

    let mut out = Vec::new();
    for category in categories {
        let experiment_stores: Vec<&ExperimentWindow> = first_window
            .iter()
            .filter(|((c, _), _)| *c == category)
            .map(|(_, w)| w)
            .collect();

        // Stores fully under control for a given week span.
        let all_control = |store: &str, weeks: &[i64]| -> bool {
            weeks.iter().all(|&wk| {
                labels
                    .get(&(category.clone(), store.to_string(), wk))
                    .map(|l| l == control)
                    .unwrap_or(false)
            })
        };

        let mut stores: Vec<String> = panel
            .rows()
            .iter()
            .filter(|r| r.category == category)
            .map(|r| r.store.clone())
            .collect();
        stores.sort();
        stores.dedup();

        let experiment_names: Vec<&str> =
            experiment_stores.iter().map(|w| w.store.as_str()).collect();

        let mut used: Vec<String> = Vec::new();
        let mut pairs: Vec<(&ExperimentWindow, String)> = Vec::new();
        let mut unmatched = Vec::new();
        for w in &experiment_stores {
            let candidate = stores.iter().find(|s| {
                !experiment_names.contains(&s.as_str())
                    && !used.contains(s)
                    && all_control(s, &w.all_weeks())
            });
            match candidate {
                Some(s) => {
                    used.push(s.clone());
                    pairs.push((w, s.clone()));
                }
                None => unmatched.push(w.store.clone()),
            }
        }

        let mut products: Vec<String> = panel
            .rows()
            .iter()
            .filter(|r| r.category == category)
            .map(|r| r.product.clone())
            .collect();
        products.sort();
        products.dedup();

        let mut col_q = Vec::new();
        let mut col_p = Vec::new();
        let mut col_product = Vec::new();
        let mut col_store = Vec::new();
        let mut col_period = Vec::new();

        for (w, ctrl_store) in &pairs {
            for product in &products {
                for store in [w.store.as_str(), ctrl_store.as_str()] {
                    let mut period_rows = Vec::new();
                    for (period, weeks) in [
                        ("control", w.control_weeks()),
                        ("treatment", w.treatment_weeks()),
                    ] {
                        let mut p_vals = Vec::new();
                        let mut q_vals = Vec::new();
                        for wk in weeks {
                            if let Some((lp, Some(lq))) =
                                cell.get(&(category.as_str(), store, wk, product.as_str()))
                            {
                                p_vals.push(*lp);
                                q_vals.push(*lq);
                            }
                        }
                        if p_vals.is_empty() {
                            period_rows.clear();
                            break;
                        }
                        period_rows.push((
                            period,
                            p_vals.iter().sum::<f64>() / p_vals.len() as f64,
                            q_vals.iter().sum::<f64>() / q_vals.len() as f64,
                        ));
                    }
                    for (period, mean_p, mean_q) in period_rows {
                        col_q.push(mean_q);
                        col_p.push(mean_p);
                        col_product.push(product.clone());
                        col_store.push(store.to_string());
                        col_period.push(period.to_string());
                    }
                }
            }
        }

        let mut table = FeTable::new();
        table.add_numeric("log_quantity", col_q)?;
        table.add_numeric("log_price", col_p)?;
        table.add_categorical("product", col_product)?;
        table.add_categorical("store", col_store)?;
        table.add_categorical("period", col_period)?;

        out.push(CategoryDid {
            category,
            table,
            n_pairs: pairs.len(),
            unmatched,
        });
    }
    Ok(out)
}

/// The standard column names for the assembled difference-in-difference table.
pub fn did_spec() -> FeSpec {
    FeSpec {
        outcome: "log_quantity".into(),
        regressor: "log_price".into(),
        fixed_effects: vec!["product".into(), "store".into(), "period".into()],
        cluster: "store".into(),
    }
}
