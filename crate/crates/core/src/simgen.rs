//! Seeded data generators: the two-component endogenous/exogenous benchmark
//! mixture, and a synthetic three-regime pricing-experiment panel.
//!
//! Every draw comes from a stream keyed by (seed, row), so generation is
//! reproducible bit for bit and safe to parallelize.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::Label;
use crate::npem::DataMatrix;
use crate::panel::{PanelRow, PanelTable};
use crate::regress::StoreWeekLabels;
use crate::rng::{domain, stream_rng};

/// Row index of the endogenous component in generated datasets.
pub const ENDOGENOUS_COMPONENT: usize = 0;
/// Row index of the exogenous component in generated datasets.
pub const EXOGENOUS_COMPONENT: usize = 1;

/// Benchmark mixture: three coordinates drawn from U(0,1)^3 (endogenous,
/// probability 1-pi) or U(0,2)^3 (exogenous, probability pi), with the error
/// built from the latent endogenous triple so that only the narrow component
/// correlates with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSimConfig {
    /// Sample size.
    pub t: usize,
    /// Weight of the exogenous component.
    pub pi: f64,
    /// True slope of the outcome equation.
    pub beta: f64,
    pub seed: u64,
}

impl MixtureSimConfig {
    fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(Error::InvalidOptions("sample size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::InvalidOptions(format!(
                "component weight {} outside [0, 1]",
                self.pi
            )));
        }
        if !self.beta.is_finite() {
            return Err(Error::InvalidOptions("slope must be finite".into()));
        }
        Ok(())
    }
}

/// Generated data plus the latent truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// (X, W1, W2) rows.
    pub data: DataMatrix,
    /// Y = beta * X + epsilon, exactly.
    pub outcome: Vec<f64>,
    /// True component index per row (0 endogenous, 1 exogenous).
    pub latent_component: Vec<usize>,
    /// The error term per row.
    pub latent_epsilon: Vec<f64>,
}

/// Draw the benchmark mixture.
///
/// Per row: a latent U(0,1)^3 triple, a latent U(0,2)^3 triple, and
/// v ~ U(0,1). The error is always epsilon = x1 + w11 + w21 + v from the
/// latent narrow triple; the observed row is whichever triple the component
/// indicator picks. That way cov(X, epsilon) is positive only through the
/// endogenous draws while the exogenous draws stay independent of the error.
pub fn simulate_mixture(config: &MixtureSimConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let rows: Vec<([f64; 3], f64, usize, f64)> = (0..config.t)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, domain::SIM_ROW, i as u64);
            let x1: f64 = rng.random();
            let w11: f64 = rng.random();
            let w21: f64 = rng.random();
            let x2: f64 = 2.0 * rng.random::<f64>();
            let w12: f64 = 2.0 * rng.random::<f64>();
            let w22: f64 = 2.0 * rng.random::<f64>();
            let v: f64 = rng.random();
            let u: f64 = rng.random();
            let epsilon = x1 + w11 + w21 + v;
            let component = if u < 1.0 - config.pi {
                ENDOGENOUS_COMPONENT
            } else {
                EXOGENOUS_COMPONENT
            };
            let triple = if component == ENDOGENOUS_COMPONENT {
                [x1, w11, w21]
            } else {
                [x2, w12, w22]
            };
            let y = config.beta * triple[0] + epsilon;
            (triple, y, component, epsilon)
        })
        .collect();

    let mut values = Vec::with_capacity(config.t * 3);
    let mut outcome = Vec::with_capacity(config.t);
    let mut latent_component = Vec::with_capacity(config.t);
    let mut latent_epsilon = Vec::with_capacity(config.t);
    for (triple, y, component, epsilon) in rows {
        values.extend_from_slice(&triple);
        outcome.push(y);
        latent_component.push(component);
        latent_epsilon.push(epsilon);
    }

    Ok(LabeledDataset {
        data: DataMatrix::new(config.t, 3, values)?,
        outcome,
        latent_component,
        latent_epsilon,
    })
}

/// Synthetic pricing-experiment panel: each store keeps chain pricing
/// (Control) or switches to raised (Hi-Lo) or lowered (EDLP) prices at a
/// store-specific week, in contiguous blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingSimConfig {
    pub n_stores: usize,
    pub n_weeks: usize,
    pub n_products: usize,
    /// (Control, Hi-Lo, EDLP) assignment probabilities.
    pub treatment_shares: [f64; 3],
    /// Log-price shift under Hi-Lo (>= 0).
    pub hilo_shift: f64,
    /// Log-price shift under EDLP (<= 0).
    pub edlp_shift: f64,
    /// Standard deviation of the log price and log quantity noise.
    pub noise_sd: f64,
    /// True slope of log quantity on log price.
    pub elasticity: f64,
    pub seed: u64,
}

impl PricingSimConfig {
    fn validate(&self) -> Result<()> {
        if self.n_stores < 1 || self.n_weeks < 1 || self.n_products < 1 {
            return Err(Error::InvalidOptions(
                "stores, weeks and products must all be >= 1".into(),
            ));
        }
        let sum: f64 = self.treatment_shares.iter().sum();
        if self.treatment_shares.iter().any(|s| *s < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidOptions(
                "treatment shares must be a probability simplex".into(),
            ));
        }
        if !(self.hilo_shift >= 0.0 && self.edlp_shift <= 0.0) {
            return Err(Error::InvalidOptions(
                "expected hilo_shift >= 0 >= edlp_shift".into(),
            ));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::InvalidOptions("noise_sd must be >= 0".into()));
        }
        if !self.elasticity.is_finite() {
            return Err(Error::InvalidOptions("elasticity must be finite".into()));
        }
        Ok(())
    }
}

impl Default for PricingSimConfig {
    fn default() -> Self {
        Self {
            n_stores: 20,
            n_weeks: 60,
            n_products: 6,
            treatment_shares: [0.4, 0.3, 0.3],
            hilo_shift: 0.04,
            edlp_shift: -0.04,
            noise_sd: 0.01,
            elasticity: -2.0,
            seed: 0,
        }
    }
}

/// Panel plus the generator's latent store-week regimes.
#[derive(Debug, Clone)]
pub struct PricingPanel {
    pub panel: PanelTable,
    pub truth: StoreWeekLabels,
    pub category: String,
    pub zone: String,
}

pub const PRICING_CATEGORY: &str = "synthetic";
pub const PRICING_ZONE: &str = "z1";

fn regime_label(idx: usize) -> Label {
    match idx {
        0 => Label::control(),
        1 => Label::hi_lo(),
        _ => Label::edlp(),
    }
}

/// Generate the pricing panel. Store regimes switch once, so every treated
/// store carries a contiguous control block followed by a contiguous
/// treatment block, exercising consecutive-week window logic downstream.
pub fn simulate_pricing(config: &PricingSimConfig) -> Result<PricingPanel> {
    config.validate()?;
    let weeks = config.n_weeks as i64;

    // Per-product base log price in [0, ln 5] and quantity intercept.
    let product_params: Vec<(f64, f64)> = (0..config.n_products)
        .map(|j| {
            let mut rng = stream_rng(config.seed, domain::PRICING_PRODUCT, j as u64);
            let base = (1.0 + 4.0 * rng.random::<f64>()).ln();
            let intercept = 2.0 + rng.random::<f64>();
            (base, intercept)
        })
        .collect();

    // Per-store regime and switch week.
    let store_plans: Vec<(usize, i64)> = (0..config.n_stores)
        .map(|s| {
            let mut rng = stream_rng(config.seed, domain::PRICING_STORE, s as u64);
            let u: f64 = rng.random();
            let regime = if u < config.treatment_shares[0] {
                0
            } else if u < config.treatment_shares[0] + config.treatment_shares[1] {
                1
            } else {
                2
            };
            // Last control week: both blocks get at least six weeks when the
            // panel is long enough for a 6+6 window.
            let switch = if weeks >= 12 {
                rng.random_range(6..=weeks - 6)
            } else {
                (weeks / 2).max(1)
            };
            (regime, switch)
        })
        .collect();

    let mut rows = Vec::with_capacity(config.n_stores * config.n_weeks * config.n_products);
    let mut truth: StoreWeekLabels = StoreWeekLabels::new();
    for (s, &(regime, switch)) in store_plans.iter().enumerate() {
        let store = format!("s{:03}", s + 1);
        for w in 1..=weeks {
            let active = if regime != 0 && w > switch { regime } else { 0 };
            truth.insert(
                (PRICING_CATEGORY.to_string(), store.clone(), w),
                regime_label(active),
            );
            let shift = match active {
                1 => config.hilo_shift,
                2 => config.edlp_shift,
                _ => 0.0,
            };
            for (j, &(base, intercept)) in product_params.iter().enumerate() {
                let cell = ((s as u64 * (weeks as u64 + 1) + w as u64)
                    * (config.n_products as u64 + 1))
                    + j as u64;
                let mut rng = stream_rng(config.seed, domain::PRICING_CELL, cell);
                let zp: f64 = rng.sample(StandardNormal);
                let zq: f64 = rng.sample(StandardNormal);
                let log_price = base + shift + config.noise_sd * zp;
                let log_quantity =
                    intercept + config.elasticity * log_price + config.noise_sd * zq;
                rows.push(PanelRow {
                    category: PRICING_CATEGORY.to_string(),
                    zone: PRICING_ZONE.to_string(),
                    store: store.clone(),
                    week: w,
                    product: format!("p{:02}", j + 1),
                    price: log_price.exp(),
                    quantity: log_quantity.exp(),
                });
            }
        }
    }

    Ok(PricingPanel {
        panel: PanelTable::new(rows)?,
        truth,
        category: PRICING_CATEGORY.to_string(),
        zone: PRICING_ZONE.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_the_dataset() {
        let config = MixtureSimConfig {
            t: 500,
            pi: 0.6,
            beta: 2.0,
            seed: 7,
        };
        let a = simulate_mixture(&config).unwrap();
        let b = simulate_mixture(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outcome_identity_holds_exactly() {
        let config = MixtureSimConfig {
            t: 2000,
            pi: 0.6,
            beta: 2.0,
            seed: 3,
        };
        let sim = simulate_mixture(&config).unwrap();
        for i in 0..config.t {
            let recomputed = config.beta * sim.data.get(i, 0) + sim.latent_epsilon[i];
            assert_eq!(sim.outcome[i], recomputed);
        }
    }

    #[test]
    fn sample_moments_match_the_mixture() {
        // E[X] = 0.4*0.5 + 0.6*1.0 = 0.8; Var(X) = 22/75.
        let config = MixtureSimConfig {
            t: 1_000_000,
            pi: 0.6,
            beta: 2.0,
            seed: 11,
        };
        let sim = simulate_mixture(&config).unwrap();
        let x = sim.data.column(0);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((mean - 0.8).abs() < 0.005, "mean = {mean}");
        assert!((var - 22.0 / 75.0).abs() < 0.005, "var = {var}");
    }

    #[test]
    fn endogenous_share_is_binomial_around_its_weight() {
        let config = MixtureSimConfig {
            t: 2000,
            pi: 0.6,
            beta: 2.0,
            seed: 5,
        };
        let sim = simulate_mixture(&config).unwrap();
        let share = sim
            .latent_component
            .iter()
            .filter(|&&c| c == ENDOGENOUS_COMPONENT)
            .count() as f64
            / config.t as f64;
        // 99% binomial bound at p = 0.4, n = 2000.
        let bound = 2.576 * (0.4f64 * 0.6 / 2000.0).sqrt();
        assert!((share - 0.4).abs() < bound, "share = {share}");
    }

    #[test]
    fn share_converges_with_sample_size() {
        let config = MixtureSimConfig {
            t: 100_000,
            pi: 0.6,
            beta: 2.0,
            seed: 13,
        };
        let sim = simulate_mixture(&config).unwrap();
        let share = sim
            .latent_component
            .iter()
            .filter(|&&c| c == ENDOGENOUS_COMPONENT)
            .count() as f64
            / config.t as f64;
        assert!((share - 0.4).abs() < 0.01);
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(simulate_mixture(&MixtureSimConfig {
            t: 0,
            pi: 0.6,
            beta: 2.0,
            seed: 0
        })
        .is_err());
        assert!(simulate_mixture(&MixtureSimConfig {
            t: 10,
            pi: 1.5,
            beta: 2.0,
            seed: 0
        })
        .is_err());
    }

    #[test]
    fn pricing_panel_is_reproducible_and_block_structured() {
        let config = PricingSimConfig {
            n_stores: 6,
            n_weeks: 20,
            n_products: 3,
            seed: 17,
            ..PricingSimConfig::default()
        };
        let a = simulate_pricing(&config).unwrap();
        let b = simulate_pricing(&config).unwrap();
        assert_eq!(a.panel.rows(), b.panel.rows());

        // Labels per store: a control prefix, then one constant regime.
        for s in 1..=config.n_stores {
            let store = format!("s{s:03}");
            let labels: Vec<Label> = (1..=config.n_weeks as i64)
                .map(|w| a.truth[&(PRICING_CATEGORY.to_string(), store.clone(), w)].clone())
                .collect();
            let first_treated = labels.iter().position(|l| *l != Label::control());
            if let Some(pos) = first_treated {
                let regime = labels[pos].clone();
                assert!(labels[pos..].iter().all(|l| *l == regime));
                assert!(labels[..pos].iter().all(|l| *l == Label::control()));
            }
        }
    }

    #[test]
    fn zero_noise_zero_shift_prices_are_identical_per_product() {
        let config = PricingSimConfig {
            n_stores: 4,
            n_weeks: 14,
            n_products: 2,
            hilo_shift: 0.0,
            edlp_shift: 0.0,
            noise_sd: 0.0,
            seed: 23,
            ..PricingSimConfig::default()
        };
        let sim = simulate_pricing(&config).unwrap();
        let mut by_product: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
        for row in sim.panel.rows() {
            by_product.entry(&row.product).or_default().push(row.price);
        }
        for prices in by_product.values() {
            assert!(prices.windows(2).all(|p| p[0] == p[1]));
        }
    }

    #[test]
    fn treated_stores_have_usable_windows() {
        let config = PricingSimConfig {
            n_stores: 12,
            n_weeks: 30,
            seed: 29,
            ..PricingSimConfig::default()
        };
        let sim = simulate_pricing(&config).unwrap();
        let windows =
            crate::regress::find_experiment_windows(&sim.truth, 6, &Label::control());
        // With shares (0.4, 0.3, 0.3) and 12 stores, some stores are treated
        // and each treated store switches with >= 6 weeks on both sides.
        assert!(!windows.is_empty());
        for w in &windows {
            assert!(w.start_week >= 1);
            assert!(w.start_week + 2 * 6 - 1 <= 30);
        }
    }
}
