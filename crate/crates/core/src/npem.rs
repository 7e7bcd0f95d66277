//! Nonparametric EM estimation of an m-component mixture whose coordinates
//! are independent within each component.
//!
//! The iteration alternates a posterior (E) step, a component-weight update,
//! and a posterior-weighted KDE update of every coordinate density. Unlike
//! parametric EM there is no ascent guarantee, so a smoothed log-likelihood
//! proxy is recorded per iteration for diagnostics and used only to pick the
//! best restart.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{BandwidthRule, BinnedDensity, WeightedSample};
use crate::rng::{self, domain};

/// n observations by r coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl DataMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidOptions(
                "data matrix must have at least one row and one column".into(),
            ));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidOptions(format!(
                "expected {} values for a {}x{} matrix, got {}",
                rows * cols,
                rows,
                cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidOptions(
                "data matrix entries must be finite".into(),
            ));
        }
        Ok(Self { values, rows, cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let r = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|row| row.len() != r) {
            return Err(Error::InvalidOptions("ragged rows in data matrix".into()));
        }
        let mut values = Vec::with_capacity(n * r);
        for row in rows {
            values.extend_from_slice(row);
        }
        Self::new(n, r, values)
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.cols + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, k)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|k| self.column(k)).collect()
    }

    /// New matrix from the given row indices (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::InvalidOptions(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.cols, values)
    }
}

/// Whether the necessary identification condition 2^r - 1 >= m*r + 1 holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identifiability {
    Satisfied,
    Violated,
}

/// Check the coordinate-count condition for an m-component mixture with r
/// conditionally independent coordinates.
#[allow(clippy::int_plus_one)] // mirror the condition exactly as stated
pub fn check_identifiability(m: usize, r: usize) -> Identifiability {
    let satisfied = if r >= 64 {
        true
    } else {
        (1u128 << r) - 1 >= (m as u128) * (r as u128) + 1
    };
    if satisfied {
        Identifiability::Satisfied
    } else {
        Identifiability::Violated
    }
}

/// Posterior initialization for a restart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Hard k-means labels smoothed 0.05 toward uniform.
    KMeans,
    /// Independent draws from the flat simplex.
    RandomPosterior,
}

/// Estimation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when max |weight change| + mean |posterior change| falls below this.
    pub tolerance: f64,
    pub restarts: usize,
    pub init: InitStrategy,
    pub seed: u64,
    pub bandwidth_rule: BandwidthRule,
    /// Evaluate densities through a linear-binned grid of this size instead
    /// of exactly. `None` keeps the exact O(n*q) evaluation.
    pub density_grid: Option<usize>,
    /// Recompute each component's bandwidth per coordinate from its
    /// posterior-weighted sample on every iteration instead of holding the
    /// pooled bandwidth fixed. Matters when component spreads differ a lot
    /// (e.g. nested supports); the default keeps the pooled bandwidth.
    #[serde(default)]
    pub adaptive_bandwidth: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-6,
            restarts: 5,
            init: InitStrategy::KMeans,
            seed: 0,
            bandwidth_rule: BandwidthRule::Silverman,
            density_grid: None,
            adaptive_bandwidth: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidOptions("max_iterations must be >= 1".into()));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidOptions("restarts must be >= 1".into()));
        }
        if !self.tolerance.is_finite() || self.tolerance <= 0.0 {
            return Err(Error::InvalidOptions("tolerance must be positive".into()));
        }
        if let BandwidthRule::Fixed(h) = self.bandwidth_rule {
            if !h.is_finite() || h <= 0.0 {
                return Err(Error::InvalidBandwidth(h));
            }
            if self.adaptive_bandwidth {
                return Err(Error::InvalidOptions(
                    "adaptive bandwidths and a fixed bandwidth are mutually exclusive".into(),
                ));
            }
        }
        if let Some(g) = self.density_grid {
            if g < 64 {
                return Err(Error::InvalidOptions(format!(
                    "density grid {g} is below the minimum of 64"
                )));
            }
        }
        Ok(())
    }
}

/// Marginal density of one coordinate within one component.
#[derive(Debug, Clone)]
pub enum CoordinateDensity {
    /// Posterior-weighted Gaussian KDE, evaluated exactly.
    Kde {
        sample: WeightedSample,
        bandwidth: f64,
    },
    /// The same estimate evaluated through a pre-computed grid.
    BinnedKde {
        sample: WeightedSample,
        bandwidth: f64,
        grid: BinnedDensity,
    },
    /// Analytic uniform density, for oracle studies where the true component
    /// densities are injected in place of estimates.
    Uniform { lo: f64, hi: f64 },
}

impl CoordinateDensity {
    pub fn weighted_kde(sample: WeightedSample, bandwidth: f64) -> Result<Self> {
        if !bandwidth.is_finite() || bandwidth <= 0.0 {
            return Err(Error::InvalidBandwidth(bandwidth));
        }
        Ok(Self::Kde { sample, bandwidth })
    }

    pub fn binned_kde(sample: WeightedSample, bandwidth: f64, grid_size: usize) -> Result<Self> {
        let grid = BinnedDensity::build(&sample, bandwidth, grid_size)?;
        Ok(Self::BinnedKde {
            sample,
            bandwidth,
            grid,
        })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidOptions(format!(
                "uniform support [{lo}, {hi}] is empty or not finite"
            )));
        }
        Ok(Self::Uniform { lo, hi })
    }

    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Self::Kde { sample, bandwidth } => exact_kde_point(sample, *bandwidth, u),
            Self::BinnedKde {
                sample,
                bandwidth,
                grid,
            } => grid
                .eval(u)
                .unwrap_or_else(|| exact_kde_point(sample, *bandwidth, u)),
            Self::Uniform { lo, hi } => {
                if (*lo..=*hi).contains(&u) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self {
            Self::Kde { bandwidth, .. } | Self::BinnedKde { bandwidth, .. } => Some(*bandwidth),
            Self::Uniform { .. } => None,
        }
    }

    pub fn sample(&self) -> Option<&WeightedSample> {
        match self {
            Self::Kde { sample, .. } | Self::BinnedKde { sample, .. } => Some(sample),
            Self::Uniform { .. } => None,
        }
    }
}

fn exact_kde_point(sample: &WeightedSample, bandwidth: f64, u: f64) -> f64 {
    let mut acc = 0.0;
    for (&x, &w) in sample.points().iter().zip(sample.weights()) {
        acc += w * crate::kde::kernel(u - x, bandwidth);
    }
    acc * (1.0 / sample.weight_sum())
}

/// A fitted mixture: simplex weights (ascending), per-row posteriors, and one
/// density handle per (component, coordinate).
#[derive(Debug, Clone)]
pub struct MixtureFit {
    weights: Vec<f64>,
    /// n x m, row-major.
    posteriors: Vec<f64>,
    /// m x r.
    densities: Vec<Vec<CoordinateDensity>>,
    data: DataMatrix,
    bandwidths: Option<Vec<f64>>,
    iterations_run: usize,
    converged: bool,
    loglik_trace: Vec<f64>,
}

impl MixtureFit {
    /// Build a fit from externally supplied component weights and coordinate
    /// densities (e.g. the true densities in an oracle study). Posteriors are
    /// one E-step of `data` under the frozen components.
    pub fn from_components(
        data: DataMatrix,
        weights: Vec<f64>,
        densities: Vec<Vec<CoordinateDensity>>,
    ) -> Result<Self> {
        let m = weights.len();
        if m == 0 || densities.len() != m || densities.iter().any(|d| d.len() != data.ncols()) {
            return Err(Error::InvalidOptions(
                "densities must be an m x r grid matching the weights and data".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidOptions(
                "weights must be a probability simplex".into(),
            ));
        }
        let cols = data.columns();
        let log_dens = log_density_table(&densities, &cols, data.nrows());
        let (posteriors, loglik) = e_step(&weights, &log_dens, data.nrows());
        Ok(Self {
            weights,
            posteriors,
            densities,
            data,
            bandwidths: None,
            iterations_run: 0,
            converged: true,
            loglik_trace: vec![loglik],
        })
    }

    /// Rebuild a fit from serialized parts: the training data, component
    /// weights, the per-component density weight columns, and one bandwidth
    /// per (component, coordinate). Posteriors are recomputed by one E-step,
    /// which matches the stored values of a fit saved from [`npem_fit`]
    /// exactly.
    pub fn from_weighted_components(
        data: DataMatrix,
        weights: Vec<f64>,
        density_weights: Vec<Vec<f64>>,
        bandwidths: Vec<Vec<f64>>,
        grid: Option<usize>,
    ) -> Result<Self> {
        let m = weights.len();
        let n = data.nrows();
        let r = data.ncols();
        if density_weights.len() != m || density_weights.iter().any(|w| w.len() != n) {
            return Err(Error::InvalidOptions(
                "density weights must be m columns of n entries".into(),
            ));
        }
        if bandwidths.len() != m || bandwidths.iter().any(|b| b.len() != r) {
            return Err(Error::InvalidOptions(
                "bandwidths must be an m x r matrix".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidOptions(
                "weights must be a probability simplex".into(),
            ));
        }
        let cols = data.columns();
        let densities: Vec<Vec<CoordinateDensity>> = density_weights
            .iter()
            .zip(&bandwidths)
            .map(|(col_weights, hs)| {
                cols.iter()
                    .zip(hs)
                    .map(|(col, &h)| {
                        let sample = WeightedSample::new(col.clone(), col_weights.clone())?;
                        match grid {
                            Some(g) => CoordinateDensity::binned_kde(sample, h, g),
                            None => CoordinateDensity::weighted_kde(sample, h),
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let log_dens = log_density_table(&densities, &cols, n);
        let (posteriors, loglik) = e_step(&weights, &log_dens, n);
        Ok(Self {
            weights,
            posteriors,
            densities,
            data,
            bandwidths: None,
            iterations_run: 0,
            converged: true,
            loglik_trace: vec![loglik],
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_coords(&self) -> usize {
        self.data.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn posterior(&self, row: usize, component: usize) -> f64 {
        self.posteriors[row * self.n_components() + component]
    }

    pub fn posterior_row(&self, row: usize) -> &[f64] {
        let m = self.n_components();
        &self.posteriors[row * m..(row + 1) * m]
    }

    /// Posterior of one component across all rows.
    pub fn posterior_column(&self, component: usize) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| self.posterior(i, component))
            .collect()
    }

    pub fn density(&self, component: usize, coordinate: usize) -> &CoordinateDensity {
        &self.densities[component][coordinate]
    }

    pub fn data(&self) -> &DataMatrix {
        &self.data
    }

    pub fn bandwidths(&self) -> Option<&[f64]> {
        self.bandwidths.as_deref()
    }

    pub fn iterations_run(&self) -> usize {
        self.iterations_run
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn loglik_trace(&self) -> &[f64] {
        &self.loglik_trace
    }

    /// Final smoothed log-likelihood proxy.
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap()
    }

    /// Verify the simplex invariants on weights and every posterior row.
    pub fn validate(&self) -> Result<()> {
        let simplex = |vals: &[f64], what: &str| -> Result<()> {
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0)
                || (vals.iter().sum::<f64>() - 1.0).abs() > 1e-10
            {
                return Err(Error::InvalidOptions(format!(
                    "{what} is not on the probability simplex: {vals:?}"
                )));
            }
            Ok(())
        };
        simplex(&self.weights, "weight vector")?;
        for i in 0..self.n_rows() {
            simplex(self.posterior_row(i), &format!("posterior row {i}"))?;
        }
        Ok(())
    }
}

/// One E-step at a new coordinate vector under the frozen fit.
pub fn posterior_of(fit: &MixtureFit, row: &[f64]) -> Result<Vec<f64>> {
    if row.len() != fit.n_coords() {
        return Err(Error::LengthMismatch {
            left_name: "row",
            left: row.len(),
            right_name: "fit coordinates",
            right: fit.n_coords(),
        });
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidOptions("row entries must be finite".into()));
    }
    let m = fit.n_components();
    let mut scores = Vec::with_capacity(m);
    for j in 0..m {
        let mut acc = 0.0f64;
        for (k, &x) in row.iter().enumerate() {
            acc += fit.density(j, k).eval(x).ln();
        }
        scores.push(fit.weights[j].ln() + acc);
    }
    Ok(normalize_scores(&scores, || {
        format!("query row {row:?} has zero density under every component")
    }))
}

/// Posterior from per-component log scores via log-sum-exp.
fn normalize_scores(scores: &[f64], context: impl Fn() -> String) -> Vec<f64> {
    let smax = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        smax > f64::NEG_INFINITY && !smax.is_nan(),
        "numerical underflow: {}; impossible with a Gaussian kernel",
        context()
    );
    let z: f64 = scores.iter().map(|s| (s - smax).exp()).sum();
    let lse = smax + z.ln();
    scores.iter().map(|s| (s - lse).exp()).collect()
}

/// log f_j(x_i) summed over coordinates: table[j][i].
fn log_density_table(
    densities: &[Vec<CoordinateDensity>],
    cols: &[Vec<f64>],
    n: usize,
) -> Vec<Vec<f64>> {
    densities
        .par_iter()
        .map(|comp| {
            let mut row_sums = vec![0.0f64; n];
            for (k, density) in comp.iter().enumerate() {
                for (i, &x) in cols[k].iter().enumerate() {
                    row_sums[i] += density.eval(x).ln();
                }
            }
            row_sums
        })
        .collect()
}

/// Full E-step: posteriors (n x m, row-major) and the log-likelihood proxy.
fn e_step(weights: &[f64], log_dens: &[Vec<f64>], n: usize) -> (Vec<f64>, f64) {
    let m = weights.len();
    let ln_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut posteriors = vec![0.0f64; n * m];
    let mut loglik = 0.0f64;
    let mut scores = vec![0.0f64; m];
    for i in 0..n {
        for j in 0..m {
            scores[j] = ln_w[j] + log_dens[j][i];
        }
        let smax = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            smax > f64::NEG_INFINITY && !smax.is_nan(),
            "numerical underflow: row {i} has zero density under every component; \
             impossible with a Gaussian kernel"
        );
        let z: f64 = scores.iter().map(|s| (s - smax).exp()).sum();
        let lse = smax + z.ln();
        for j in 0..m {
            posteriors[i * m + j] = (scores[j] - lse).exp();
        }
        loglik += lse;
    }
    (posteriors, loglik)
}

fn column_means(posteriors: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; m];
    for i in 0..n {
        for j in 0..m {
            sums[j] += posteriors[i * m + j];
        }
    }
    sums.iter().map(|s| s / n as f64).collect()
}

/// Per-component, per-coordinate bandwidths for one density update.
type BandwidthMatrix = Vec<Vec<f64>>;

/// Pre-sorted index per coordinate, for weighted quantiles in adaptive mode.
fn sort_orders(cols: &[Vec<f64>]) -> Vec<Vec<usize>> {
    cols.iter()
        .map(|col| {
            let mut order: Vec<usize> = (0..col.len()).collect();
            order.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap());
            order
        })
        .collect()
}

/// The bandwidth matrix for the current posteriors: the pooled bandwidths
/// replicated per component, or per-component weighted Silverman bandwidths
/// in adaptive mode.
fn iteration_bandwidths(
    cols: &[Vec<f64>],
    orders: &[Vec<usize>],
    pooled: &[f64],
    posteriors: &[f64],
    n: usize,
    m: usize,
    adaptive: bool,
) -> Result<BandwidthMatrix> {
    if !adaptive {
        return Ok(vec![pooled.to_vec(); m]);
    }
    (0..m)
        .map(|j| {
            let weights: Vec<f64> = (0..n).map(|i| posteriors[i * m + j]).collect();
            if weights.iter().sum::<f64>() <= 0.0 {
                return Err(Error::ComponentCollapsed { component: j });
            }
            cols.iter()
                .zip(orders)
                .map(|(col, order)| {
                    crate::kde::weighted_silverman_sorted(col, &weights, order)
                })
                .collect()
        })
        .collect()
}

/// Build the m x r density grid from the current posterior matrix.
fn build_densities(
    cols: &[Vec<f64>],
    posteriors: &[f64],
    n: usize,
    m: usize,
    bandwidths: &BandwidthMatrix,
    grid: Option<usize>,
) -> Result<Vec<Vec<CoordinateDensity>>> {
    (0..m)
        .map(|j| {
            let weights: Vec<f64> = (0..n).map(|i| posteriors[i * m + j]).collect();
            if weights.iter().sum::<f64>() <= 0.0 {
                return Err(Error::ComponentCollapsed { component: j });
            }
            cols.iter()
                .zip(&bandwidths[j])
                .map(|(col, &h)| {
                    let sample = WeightedSample::new(col.clone(), weights.clone())?;
                    match grid {
                        Some(g) => CoordinateDensity::binned_kde(sample, h, g),
                        None => CoordinateDensity::weighted_kde(sample, h),
                    }
                })
                .collect()
        })
        .collect()
}

struct EmOutcome {
    posteriors: Vec<f64>,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Per-coordinate state that is fixed across EM iterations in binned mode:
/// the grid geometry and each point's node assignment. Kernel samples are
/// fixed too unless the bandwidth adapts per iteration.
struct BinnedCoordinate {
    size: usize,
    step: f64,
    /// Lower grid node per point.
    idx: Vec<u32>,
    /// Interpolation weight toward the upper node, per point.
    frac: Vec<f64>,
    /// Kernel at node offsets, cached when the bandwidth is fixed.
    fixed_kern: Option<Vec<f64>>,
}

impl BinnedCoordinate {
    fn build(col: &[f64], pooled_bandwidth: f64, grid_size: usize, adaptive: bool) -> Self {
        let pad = 8.0 * pooled_bandwidth;
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min) - pad;
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad;
        let step = (hi - lo) / (grid_size - 1) as f64;
        let mut idx = Vec::with_capacity(col.len());
        let mut frac = Vec::with_capacity(col.len());
        for &x in col {
            let pos = (x - lo) / step;
            let i = (pos.floor() as usize).min(grid_size - 2);
            idx.push(i as u32);
            frac.push(pos - i as f64);
        }
        let mut coord = Self {
            size: grid_size,
            step,
            idx,
            frac,
            fixed_kern: None,
        };
        if !adaptive {
            coord.fixed_kern = Some(coord.kernel_samples(pooled_bandwidth));
        }
        coord
    }

    fn kernel_samples(&self, bandwidth: f64) -> Vec<f64> {
        let radius = ((8.0 * bandwidth / self.step).ceil() as usize).min(self.size - 1);
        (0..=radius)
            .map(|d| crate::kde::kernel(d as f64 * self.step, bandwidth))
            .collect()
    }

    fn bin(&self, weights: &[f64], bins: &mut [f64]) {
        bins.fill(0.0);
        for ((&i, &f), &w) in self.idx.iter().zip(&self.frac).zip(weights) {
            bins[i as usize] += w * (1.0 - f);
            bins[i as usize + 1] += w * f;
        }
    }

    fn convolve(&self, kern: &[f64], bins: &[f64], out: &mut [f64]) {
        let k0 = kern[0];
        for (o, b) in out.iter_mut().zip(bins) {
            *o = k0 * b;
        }
        for (d, &kd) in kern.iter().enumerate().skip(1) {
            let tail = self.size - d;
            for (o, b) in out[d..].iter_mut().zip(&bins[..tail]) {
                *o += kd * *b;
            }
            for (o, b) in out[..tail].iter_mut().zip(&bins[d..]) {
                *o += kd * *b;
            }
        }
    }

    /// Accumulate the log density at each point into `acc` by interpolating
    /// the log of the grid values (plus the normalization `ln_inv`).
    fn accumulate_log_density(&self, ln_grid: &[f64], ln_inv: f64, acc: &mut [f64]) {
        for ((&i, &f), a) in self.idx.iter().zip(&self.frac).zip(acc.iter_mut()) {
            let lo = ln_grid[i as usize];
            let hi = ln_grid[i as usize + 1];
            let v = if lo.is_finite() && hi.is_finite() {
                lo + f * (hi - lo)
            } else {
                f64::NEG_INFINITY
            };
            *a += v + ln_inv;
        }
    }
}

/// Density evaluation engine for the EM iterations. The binned variant
/// caches everything that does not change between iterations.
enum IterEngine<'a> {
    Exact {
        cols: &'a [Vec<f64>],
    },
    Binned {
        coords: Vec<BinnedCoordinate>,
    },
}

impl<'a> IterEngine<'a> {
    fn new(cols: &'a [Vec<f64>], pooled: &[f64], grid: Option<usize>, adaptive: bool) -> Self {
        match grid {
            None => IterEngine::Exact { cols },
            Some(g) => IterEngine::Binned {
                coords: cols
                    .iter()
                    .zip(pooled)
                    .map(|(col, &h)| BinnedCoordinate::build(col, h, g, adaptive))
                    .collect(),
            },
        }
    }

    /// table[j][i] = sum_k ln f_jk(x_ik) under the current posteriors.
    fn log_density_tables(
        &self,
        posteriors: &[f64],
        bandwidths: &BandwidthMatrix,
        n: usize,
        m: usize,
        table: &mut [Vec<f64>],
    ) -> Result<()> {
        match self {
            IterEngine::Exact { cols } => {
                let densities = build_densities(cols, posteriors, n, m, bandwidths, None)?;
                let fresh = log_density_table(&densities, cols, n);
                for (dst, src) in table.iter_mut().zip(fresh) {
                    *dst = src;
                }
                Ok(())
            }
            IterEngine::Binned { coords } => {
                let size = coords[0].size;
                let mut weights = vec![0.0f64; n];
                let mut bins = vec![0.0f64; size];
                let mut conv = vec![0.0f64; size];
                let mut ln_grid = vec![0.0f64; size];
                for j in 0..m {
                    for (i, w) in weights.iter_mut().enumerate() {
                        *w = posteriors[i * m + j];
                    }
                    let wsum: f64 = weights.iter().sum();
                    if wsum <= 0.0 {
                        return Err(Error::ComponentCollapsed { component: j });
                    }
                    let ln_inv = -wsum.ln();
                    table[j].fill(0.0);
                    for (k, coord) in coords.iter().enumerate() {
                        coord.bin(&weights, &mut bins);
                        match &coord.fixed_kern {
                            Some(kern) => coord.convolve(kern, &bins, &mut conv),
                            None => {
                                let kern = coord.kernel_samples(bandwidths[j][k]);
                                coord.convolve(&kern, &bins, &mut conv);
                            }
                        }
                        for (lg, &c) in ln_grid.iter_mut().zip(&conv) {
                            *lg = c.ln();
                        }
                        coord.accumulate_log_density(&ln_grid, ln_inv, &mut table[j]);
                    }
                }
                Ok(())
            }
        }
    }
}

fn run_em(
    cols: &[Vec<f64>],
    pooled: &[f64],
    n: usize,
    m: usize,
    options: &FitOptions,
    init_posteriors: Vec<f64>,
) -> Result<EmOutcome> {
    let engine = IterEngine::new(cols, pooled, options.density_grid, options.adaptive_bandwidth);
    let orders = if options.adaptive_bandwidth {
        sort_orders(cols)
    } else {
        Vec::new()
    };
    let mut posteriors = init_posteriors;
    let mut prev_weights = column_means(&posteriors, n, m);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut log_dens: Vec<Vec<f64>> = vec![vec![0.0; n]; m];

    for _ in 0..options.max_iterations {
        iterations += 1;
        let weights = column_means(&posteriors, n, m);
        let bandwidths = iteration_bandwidths(
            cols,
            &orders,
            pooled,
            &posteriors,
            n,
            m,
            options.adaptive_bandwidth,
        )?;
        engine.log_density_tables(&posteriors, &bandwidths, n, m, &mut log_dens)?;
        let (new_posteriors, loglik) = e_step(&weights, &log_dens, n);
        trace.push(loglik);

        let weight_delta = weights
            .iter()
            .zip(&prev_weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let posterior_delta = new_posteriors
            .iter()
            .zip(&posteriors)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (n * m) as f64;

        posteriors = new_posteriors;
        prev_weights = weights;

        if weight_delta + posterior_delta < options.tolerance {
            converged = true;
            break;
        }
    }

    Ok(EmOutcome {
        posteriors,
        iterations,
        converged,
        trace,
    })
}

/// Freeze an EM state into a canonical fit: component weights and densities
/// from the final posterior matrix, components ordered by ascending weight,
/// and stored posteriors recomputed once under the frozen components.
fn freeze_fit(
    data: &DataMatrix,
    cols: &[Vec<f64>],
    pooled: &[f64],
    m: usize,
    options: &FitOptions,
    outcome: EmOutcome,
) -> Result<MixtureFit> {
    let n = data.nrows();
    let weights = column_means(&outcome.posteriors, n, m);

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| weights[a].partial_cmp(&weights[b]).unwrap().then(a.cmp(&b)));

    let ordered_weights: Vec<f64> = order.iter().map(|&j| weights[j]).collect();
    let mut ordered_posteriors = vec![0.0f64; n * m];
    for i in 0..n {
        for (jj, &j) in order.iter().enumerate() {
            ordered_posteriors[i * m + jj] = outcome.posteriors[i * m + j];
        }
    }

    let orders = if options.adaptive_bandwidth {
        sort_orders(cols)
    } else {
        Vec::new()
    };
    let bandwidths = iteration_bandwidths(
        cols,
        &orders,
        pooled,
        &ordered_posteriors,
        n,
        m,
        options.adaptive_bandwidth,
    )?;
    let densities = build_densities(
        cols,
        &ordered_posteriors,
        n,
        m,
        &bandwidths,
        options.density_grid,
    )?;
    let log_dens = log_density_table(&densities, cols, n);
    let (posteriors, loglik) = e_step(&ordered_weights, &log_dens, n);

    let mut trace = outcome.trace;
    trace.push(loglik);

    Ok(MixtureFit {
        weights: ordered_weights,
        posteriors,
        densities,
        data: data.clone(),
        bandwidths: Some(pooled.to_vec()),
        iterations_run: outcome.iterations,
        converged: outcome.converged,
        loglik_trace: trace,
    })
}

/// Smoothed hard k-means labels: 0.95 on the winning cluster plus 0.05/m
/// everywhere.
fn kmeans_init(data: &DataMatrix, m: usize, seed: u64, restart: u64) -> Vec<f64> {
    let assignments = kmeans_assignments(data, m, seed, restart);
    let n = data.nrows();
    let base = 0.05 / m as f64;
    let mut posteriors = vec![base; n * m];
    for (i, &a) in assignments.iter().enumerate() {
        posteriors[i * m + a] += 0.95;
    }
    posteriors
}

fn kmeans_assignments(data: &DataMatrix, m: usize, seed: u64, restart: u64) -> Vec<usize> {
    use rand::Rng;
    let n = data.nrows();
    let r = data.ncols();
    let mut rng = rng::stream_rng(seed, domain::KMEANS, restart);

    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(m);
    centroids.push(data.row(rng.random_range(0..n)).to_vec());
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centroids[0])).collect();
    while centroids.len() < m {
        let total: f64 = min_d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(data.row(next).to_vec());
        for (i, d) in min_d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), centroids.last().unwrap()));
        }
    }

    // Lloyd iterations until assignments stabilize.
    let mut assignments = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, assignment) in assignments.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(data.row(i), c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if *assignment != best {
                *assignment = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; r]; m];
        let mut counts = vec![0usize; m];
        for (i, &assignment) in assignments.iter().enumerate() {
            counts[assignment] += 1;
            for (s, &v) in sums[assignment].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for j in 0..m {
            if counts[j] == 0 {
                // Hand the emptiest cluster the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(data.row(a), &centroids[assignments[a]])
                            .partial_cmp(&sq_dist(data.row(b), &centroids[assignments[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[j] = data.row(far).to_vec();
            } else {
                for k in 0..r {
                    centroids[j][k] = sums[j][k] / counts[j] as f64;
                }
            }
        }
    }
    assignments
}

/// Independent draws from the flat simplex per row.
fn random_posterior_init(n: usize, m: usize, seed: u64, restart: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = rng::stream_rng(seed, domain::RESTART, restart);
    let mut posteriors = vec![0.0f64; n * m];
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..m {
            let e = -(1.0 - rng.random::<f64>()).ln();
            posteriors[i * m + j] = e;
            sum += e;
        }
        if sum > 0.0 {
            for j in 0..m {
                posteriors[i * m + j] /= sum;
            }
        } else {
            for j in 0..m {
                posteriors[i * m + j] = 1.0 / m as f64;
            }
        }
    }
    posteriors
}

/// Fit an m-component mixture by nonparametric EM.
///
/// Runs `options.restarts` independent starts (the configured initializer
/// first, random-posterior starts after) and returns the restart with the
/// highest smoothed log-likelihood proxy. Components are ordered by ascending
/// weight. An identifiability violation logs a warning but does not stop the
/// fit.
pub fn npem_fit(data: &DataMatrix, m: usize, options: &FitOptions) -> Result<MixtureFit> {
    options.validate()?;
    if m < 1 {
        return Err(Error::InvalidOptions("component count must be >= 1".into()));
    }
    let n = data.nrows();
    let r = data.ncols();
    if n < m * r {
        return Err(Error::InsufficientData { needed: m * r, got: n });
    }
    if check_identifiability(m, r) == Identifiability::Violated {
        log::warn!(
            "identifiability condition 2^{r} - 1 >= {m}*{r} + 1 is violated; proceeding anyway"
        );
    }

    let cols = data.columns();
    let bandwidths: Vec<f64> = cols
        .iter()
        .enumerate()
        .map(|(k, col)| {
            options.bandwidth_rule.resolve(col).map_err(|e| match e {
                Error::DegenerateSample { .. } => Error::DegenerateSample {
                    context: format!("coordinate {k}"),
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;

    let candidates: Vec<Result<(f64, MixtureFit)>> = (0..options.restarts)
        .into_par_iter()
        .map(|t| {
            let init = if t == 0 {
                match options.init {
                    InitStrategy::KMeans => kmeans_init(data, m, options.seed, t as u64),
                    InitStrategy::RandomPosterior => {
                        random_posterior_init(n, m, options.seed, t as u64)
                    }
                }
            } else {
                random_posterior_init(n, m, options.seed, t as u64)
            };
            let outcome = run_em(&cols, &bandwidths, n, m, options, init)?;
            let fit = freeze_fit(data, &cols, &bandwidths, m, options, outcome)?;
            Ok((fit.loglik(), fit))
        })
        .collect();

    let mut best: Option<(f64, MixtureFit)> = None;
    for candidate in candidates {
        let (loglik, fit) = candidate?;
        match &best {
            Some((best_ll, _)) if *best_ll >= loglik => {}
            _ => best = Some((loglik, fit)),
        }
    }
    Ok(best.expect("at least one restart").1)
}
