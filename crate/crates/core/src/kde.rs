//! Kernel density primitives: Silverman bandwidths, posterior-weighted
//! Gaussian kernel densities, and a linear-binned fast evaluation path.
//!
//! The Gaussian kernel is used throughout. Its infinite support keeps every
//! density strictly positive on the data range, which the mixture posteriors
//! depend on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Half-width of the binned grid and of the truncated convolution kernel,
/// in bandwidth units. exp(-8^2/2) ~ 1.3e-14, far below binning error.
const GRID_PAD_BANDWIDTHS: f64 = 8.0;

/// Standard Gaussian density.
#[inline]
pub(crate) fn gaussian(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Scaled kernel K_h(t) = phi(t/h)/h.
#[inline]
pub(crate) fn kernel(t: f64, h: f64) -> f64 {
    gaussian(t / h) / h
}

/// How the kernel bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Rule-of-thumb bandwidth from the pooled sample.
    Silverman,
    /// Fixed user-supplied bandwidth (must be positive).
    Fixed(f64),
}

impl BandwidthRule {
    /// Resolve the rule against a concrete sample.
    pub fn resolve(&self, sample: &[f64]) -> Result<f64> {
        match *self {
            BandwidthRule::Silverman => silverman_bandwidth(sample),
            BandwidthRule::Fixed(h) => {
                if h.is_finite() && h > 0.0 {
                    Ok(h)
                } else {
                    Err(Error::InvalidBandwidth(h))
                }
            }
        }
    }
}

/// Points with non-negative weights, e.g. one coordinate of the data weighted
/// by one posterior column.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    points: Vec<f64>,
    weights: Vec<f64>,
    weight_sum: f64,
}

impl WeightedSample {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left_name: "points",
                left: points.len(),
                right_name: "weights",
                right: weights.len(),
            });
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidOptions("sample points must be finite".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidOptions(
                "weights must be finite and non-negative".into(),
            ));
        }
        let weight_sum: f64 = weights.iter().sum();
        if weight_sum <= 0.0 {
            return Err(Error::DegenerateWeights);
        }
        Ok(Self {
            points,
            weights,
            weight_sum,
        })
    }

    /// Unit weight on every point.
    pub fn unweighted(points: Vec<f64>) -> Result<Self> {
        let weights = vec![1.0; points.len()];
        Self::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    pub fn min(&self) -> f64 {
        self.points.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.points
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Silverman rule-of-thumb bandwidth:
/// h = 0.9 * min(sd, IQR/1.34) * n^(-1/5).
///
/// Falls back to the standard deviation when the IQR is zero; errors when the
/// sample has no spread at all.
pub fn silverman_bandwidth(sample: &[f64]) -> Result<f64> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidOptions("sample points must be finite".into()));
    }
    let nf = n as f64;
    let mean = sample.iter().sum::<f64>() / nf;
    let ss: f64 = sample.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (nf - 1.0)).sqrt();

    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);

    let spread = if iqr > 0.0 {
        sd.min(iqr / 1.34)
    } else {
        sd
    };
    if spread <= 0.0 {
        return Err(Error::DegenerateSample {
            context: "bandwidth sample".into(),
        });
    }
    Ok(0.9 * spread * nf.powf(-0.2))
}

/// Weighted Silverman bandwidth for a posterior-weighted sample:
/// h = 0.9 * min(weighted sd, weighted IQR/1.34) * (weight sum)^(-1/5).
///
/// This is the per-component bandwidth used by the adaptive (non-default)
/// estimation mode, where the weight sum plays the role of the component's
/// effective sample size.
pub fn weighted_silverman_bandwidth(sample: &WeightedSample) -> Result<f64> {
    let mut order: Vec<usize> = (0..sample.len()).collect();
    order.sort_by(|&a, &b| sample.points()[a].partial_cmp(&sample.points()[b]).unwrap());
    weighted_silverman_sorted(sample.points(), sample.weights(), &order)
}

/// Same as [`weighted_silverman_bandwidth`] with the sort order precomputed.
pub(crate) fn weighted_silverman_sorted(
    points: &[f64],
    weights: &[f64],
    order: &[usize],
) -> Result<f64> {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let mean = points
        .iter()
        .zip(weights)
        .map(|(x, w)| x * w)
        .sum::<f64>()
        / wsum;
    let var = points
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum::<f64>()
        / wsum;
    let sd = var.sqrt();

    // Weighted quantile: first sorted point where the cumulative weight
    // crosses q * wsum.
    let quantile = |q: f64| -> f64 {
        let target = q * wsum;
        let mut cum = 0.0;
        for &i in order {
            cum += weights[i];
            if cum >= target {
                return points[i];
            }
        }
        points[*order.last().unwrap()]
    };
    let iqr = quantile(0.75) - quantile(0.25);

    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if spread <= 0.0 {
        return Err(Error::DegenerateSample {
            context: "weighted bandwidth sample".into(),
        });
    }
    Ok(0.9 * spread * wsum.powf(-0.2))
}

/// Exact weighted KDE: f(u) = sum_i w_i K_h(u - x_i) / sum_i w_i.
pub fn kde_eval(sample: &WeightedSample, bandwidth: f64, query: &[f64]) -> Result<Vec<f64>> {
    if !bandwidth.is_finite() || bandwidth <= 0.0 {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    let inv_sum = 1.0 / sample.weight_sum();
    Ok(query
        .iter()
        .map(|&u| {
            let mut acc = 0.0;
            for (&x, &w) in sample.points().iter().zip(sample.weights()) {
                acc += w * kernel(u - x, bandwidth);
            }
            acc * inv_sum
        })
        .collect())
}

/// A weighted KDE pre-evaluated on a uniform grid; queries are answered by
/// linear interpolation.
///
/// Grid values come from linear binning followed by a convolution with the
/// kernel truncated at 8 bandwidths. For grid step d the absolute deviation
/// from the exact KDE is bounded by the curvature of the kernel:
/// binning and interpolation each contribute at most d^2/8 * sup|f''|
/// with sup|f''| <= phi(0)/h^3, plus a truncation tail below 1.3e-14/h,
/// so err <= 0.1 * d^2 / h^3 + 1.3e-14 / h.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDensity {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl BinnedDensity {
    pub fn build(sample: &WeightedSample, bandwidth: f64, grid_size: usize) -> Result<Self> {
        if !bandwidth.is_finite() || bandwidth <= 0.0 {
            return Err(Error::InvalidBandwidth(bandwidth));
        }
        if grid_size < 64 {
            return Err(Error::InvalidOptions(format!(
                "grid size {grid_size} is below the minimum of 64"
            )));
        }
        let pad = GRID_PAD_BANDWIDTHS * bandwidth;
        let lo = sample.min() - pad;
        let hi = sample.max() + pad;
        let step = (hi - lo) / (grid_size - 1) as f64;

        // Linear binning: split each weight between the two nearest nodes.
        let mut bins = vec![0.0f64; grid_size];
        for (&x, &w) in sample.points().iter().zip(sample.weights()) {
            let pos = (x - lo) / step;
            let idx = (pos.floor() as usize).min(grid_size - 2);
            let frac = pos - idx as f64;
            bins[idx] += w * (1.0 - frac);
            bins[idx + 1] += w * frac;
        }

        // Convolve with the kernel, truncated where its tail is negligible.
        let radius = ((GRID_PAD_BANDWIDTHS * bandwidth / step).ceil() as usize).min(grid_size - 1);
        let kern: Vec<f64> = (0..=radius)
            .map(|d| kernel(d as f64 * step, bandwidth))
            .collect();

        let mut values = vec![0.0f64; grid_size];
        for c in 0..grid_size {
            values[c] = bins[c] * kern[0];
        }
        for (d, &kd) in kern.iter().enumerate().skip(1) {
            for c in d..grid_size {
                values[c] += bins[c - d] * kd;
            }
            for c in 0..grid_size - d {
                values[c] += bins[c + d] * kd;
            }
        }
        let inv_sum = 1.0 / sample.weight_sum();
        for v in &mut values {
            *v *= inv_sum;
        }

        Ok(Self { lo, step, values })
    }

    /// Interpolated density, or `None` when the query lies off the grid.
    pub fn eval(&self, u: f64) -> Option<f64> {
        let pos = (u - self.lo) / self.step;
        if !(0.0..=(self.values.len() - 1) as f64).contains(&pos) {
            return None;
        }
        let idx = (pos.floor() as usize).min(self.values.len() - 2);
        let frac = pos - idx as f64;
        Some(self.values[idx] + frac * (self.values[idx + 1] - self.values[idx]))
    }

    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn step(&self) -> f64 {
        self.step
    }
}

/// Binned approximation of [`kde_eval`]. Queries outside the grid fall back
/// to the exact evaluation.
pub fn kde_eval_binned(
    sample: &WeightedSample,
    bandwidth: f64,
    grid_size: usize,
    query: &[f64],
) -> Result<Vec<f64>> {
    let grid = BinnedDensity::build(sample, bandwidth, grid_size)?;
    query
        .iter()
        .map(|&u| match grid.eval(u) {
            Some(v) => Ok(v),
            None => kde_eval(sample, bandwidth, &[u]).map(|v| v[0]),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn uniform_points(n: usize, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::stream_rng(seed, 0, 0);
        (0..n).map(|_| scale * rng.random::<f64>()).collect()
    }

    /// Trapezoid quadrature of the exact KDE over [min-5h, max+5h].
    fn integral_of_kde(sample: &WeightedSample, h: f64, points: usize) -> f64 {
        let lo = sample.min() - 5.0 * h;
        let hi = sample.max() + 5.0 * h;
        let step = (hi - lo) / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|i| lo + i as f64 * step).collect();
        let vals = kde_eval(sample, h, &grid).unwrap();
        let mut area = 0.0;
        for i in 1..points {
            area += 0.5 * (vals[i - 1] + vals[i]) * step;
        }
        area
    }

    #[test]
    fn silverman_rejects_constant_sample() {
        let err = silverman_bandwidth(&[5.0, 5.0, 5.0, 5.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateSample { .. }));
    }

    #[test]
    fn silverman_on_small_ladder() {
        // sd = sqrt(2.5) ~ 1.5811, IQR = 2 so IQR/1.34 ~ 1.4925 is the min;
        // h = 0.9 * (2/1.34) * 5^(-0.2).
        let h = silverman_bandwidth(&[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let expected = 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2);
        assert!((h - expected).abs() < 1e-12, "h = {h}");
        assert!((h - 0.9735846).abs() < 1e-6);
    }

    #[test]
    fn silverman_matches_direct_formula_on_random_sample() {
        let mut rng = crate::rng::stream_rng(11, 0, 0);
        let sample: Vec<f64> = (0..100)
            .map(|_| {
                // sum of 12 uniforms, shifted: approximately standard normal
                (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0
            })
            .collect();
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let mut sorted = sample.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let expected = 0.9 * sd.min(iqr / 1.34) * n.powf(-0.2);

        let h = silverman_bandwidth(&sample).unwrap();
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn silverman_uses_sd_when_iqr_is_zero() {
        // Middle half identical, tails spread: IQR = 0 but sd > 0.
        let sample = [-10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 10.0];
        let h = silverman_bandwidth(&sample).unwrap();
        let n = sample.len() as f64;
        let mean = 0.0;
        let sd =
            (sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((h - 0.9 * sd * n.powf(-0.2)).abs() < 1e-12);
    }

    #[test]
    fn weighted_silverman_reduces_to_plain_under_unit_weights() {
        let points = uniform_points(150, 2.0, 31);
        let sample = WeightedSample::unweighted(points.clone()).unwrap();
        let weighted = weighted_silverman_bandwidth(&sample).unwrap();
        let plain = silverman_bandwidth(&points).unwrap();
        // The weighted quantile takes the first crossing point rather than
        // interpolating, so the two agree only approximately.
        assert!(
            (weighted - plain).abs() / plain < 0.05,
            "weighted {weighted} vs plain {plain}"
        );
        // Effective sample size drives the rate: halving every weight leaves
        // the spread but changes the weight sum.
        let half = WeightedSample::new(points, vec![0.5; 150]).unwrap();
        let h_half = weighted_silverman_bandwidth(&half).unwrap();
        assert!(h_half > weighted);
    }

    #[test]
    fn weighted_silverman_ignores_zero_weight_points() {
        // Mass only on a tight cluster; the far point has zero weight.
        let mut points = vec![0.0, 0.1, 0.2, 0.3, 0.4];
        let mut weights = vec![1.0; 5];
        points.push(1000.0);
        weights.push(0.0);
        let with_outlier =
            weighted_silverman_bandwidth(&WeightedSample::new(points, weights).unwrap()).unwrap();
        let without = weighted_silverman_bandwidth(
            &WeightedSample::unweighted(vec![0.0, 0.1, 0.2, 0.3, 0.4]).unwrap(),
        )
        .unwrap();
        assert!((with_outlier - without).abs() < 1e-12);
    }

    #[test]
    fn kernel_value_at_own_center() {
        let sample = WeightedSample::new(vec![0.0], vec![1.0]).unwrap();
        let v = kde_eval(&sample, 1.0, &[0.0]).unwrap();
        assert!((v[0] - 0.3989422804014327).abs() < 1e-15);
    }

    #[test]
    fn unit_weights_equal_unweighted_kde_exactly() {
        let points = uniform_points(200, 2.0, 3);
        let sample = WeightedSample::unweighted(points.clone()).unwrap();
        let h = 0.25;
        let query = [0.1, 0.7, 1.3, 1.9];
        let weighted = kde_eval(&sample, h, &query).unwrap();
        for (q, w) in query.iter().zip(&weighted) {
            let mut acc = 0.0;
            for &x in &points {
                acc += 1.0 * kernel(q - x, h);
            }
            let unweighted = acc * (1.0 / points.len() as f64);
            assert_eq!(*w, unweighted);
        }
        // Power-of-two rescaling is exact in binary floating point.
        let scaled = WeightedSample::new(points, vec![4.0; 200]).unwrap();
        assert_eq!(weighted, kde_eval(&scaled, h, &query).unwrap());
    }

    #[test]
    fn density_integrates_to_one() {
        let points = uniform_points(300, 2.0, 5);
        let weights: Vec<f64> = uniform_points(300, 1.0, 6);
        let sample = WeightedSample::new(points, weights).unwrap();
        let h = silverman_bandwidth(sample.points()).unwrap();
        let area = integral_of_kde(&sample, h, 4001);
        assert!((area - 1.0).abs() < 1e-3, "area = {area}");
    }

    #[test]
    fn rejects_bad_bandwidths_and_weights() {
        let sample = WeightedSample::unweighted(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            kde_eval(&sample, 0.0, &[0.5]),
            Err(Error::InvalidBandwidth(_))
        ));
        assert!(matches!(
            kde_eval(&sample, -1.0, &[0.5]),
            Err(Error::InvalidBandwidth(_))
        ));
        assert!(matches!(
            WeightedSample::new(vec![0.0, 1.0], vec![0.0, 0.0]),
            Err(Error::DegenerateWeights)
        ));
        assert!(matches!(
            kde_eval_binned(&sample, 1.0, 32, &[0.5]),
            Err(Error::InvalidOptions(_))
        ));
    }

    #[test]
    fn binned_matches_exact_on_uniform_data() {
        let points = uniform_points(2000, 2.0, 7);
        let weights = uniform_points(2000, 1.0, 8);
        let sample = WeightedSample::new(points, weights).unwrap();
        let h = silverman_bandwidth(sample.points()).unwrap();
        let query = uniform_points(500, 2.0, 9);
        let exact = kde_eval(&sample, h, &query).unwrap();
        let binned = kde_eval_binned(&sample, h, 4096, &query).unwrap();
        let max_err = exact
            .iter()
            .zip(&binned)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-4, "max_err = {max_err}");
    }

    #[test]
    fn binned_single_point_peaks_within_one_cell() {
        let sample = WeightedSample::new(vec![0.3], vec![1.0]).unwrap();
        let grid = BinnedDensity::build(&sample, 0.5, 256).unwrap();
        let peak = (0..grid.grid_size())
            .max_by(|&a, &b| {
                let xa = grid.lo() + a as f64 * grid.step();
                let xb = grid.lo() + b as f64 * grid.step();
                grid.eval(xa)
                    .unwrap()
                    .partial_cmp(&grid.eval(xb).unwrap())
                    .unwrap()
            })
            .unwrap();
        let peak_x = grid.lo() + peak as f64 * grid.step();
        assert!((peak_x - 0.3).abs() <= grid.step());
    }

    #[test]
    fn binned_unit_weights_match_scaled_weights() {
        let points = uniform_points(400, 2.0, 13);
        let unit = WeightedSample::unweighted(points.clone()).unwrap();
        let scaled = WeightedSample::new(points, vec![2.0; 400]).unwrap();
        let q = [0.2, 1.0, 1.8];
        assert_eq!(
            kde_eval_binned(&unit, 0.2, 128, &q).unwrap(),
            kde_eval_binned(&scaled, 0.2, 128, &q).unwrap()
        );
    }

    #[test]
    fn binned_error_shrinks_as_grid_doubles() {
        let points = uniform_points(500, 2.0, 21);
        let sample = WeightedSample::unweighted(points).unwrap();
        let h = silverman_bandwidth(sample.points()).unwrap();
        let query = uniform_points(300, 2.0, 22);
        let exact = kde_eval(&sample, h, &query).unwrap();
        let max_err = |grid: usize| -> f64 {
            let approx = kde_eval_binned(&sample, h, grid, &query).unwrap();
            exact
                .iter()
                .zip(&approx)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        };
        let mut prev = max_err(64);
        for grid in [128, 256, 512] {
            let cur = max_err(grid);
            assert!(
                cur <= prev,
                "error grew from {prev} to {cur} at grid {grid}"
            );
            prev = cur;
        }
    }

    #[test]
    fn off_grid_queries_fall_back_to_exact() {
        let sample = WeightedSample::unweighted(vec![0.0, 0.5, 1.0]).unwrap();
        let h = 0.1;
        let far = 1000.0;
        let binned = kde_eval_binned(&sample, h, 64, &[far]).unwrap();
        let exact = kde_eval(&sample, h, &[far]).unwrap();
        assert_eq!(binned, exact);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn kde_is_nonnegative_and_integrates_to_one(
                seed in 0u64..1000,
                n in 5usize..120,
                scale in 0.5f64..4.0,
            ) {
                let points = uniform_points(n, scale, seed);
                let weights: Vec<f64> =
                    uniform_points(n, 1.0, seed + 1).iter().map(|w| w + 0.01).collect();
                let sample = WeightedSample::new(points, weights).unwrap();
                let h = match silverman_bandwidth(sample.points()) {
                    Ok(h) => h,
                    Err(_) => return Ok(()), // degenerate draw
                };
                let vals = kde_eval(&sample, h, &[0.0, scale / 2.0, scale]).unwrap();
                prop_assert!(vals.iter().all(|v| v.is_finite() && *v >= 0.0));
                let area = integral_of_kde(&sample, h, 2001);
                prop_assert!((area - 1.0).abs() < 1e-3);
            }
        }
    }
}
