//! Two-stage recovery of exogenous variation from an endogenous regressor.
//!
//! When an observed regressor mixes endogenous and exogenous draws (say, a
//! store's everyday prices and its occasional pricing experiments), a finite
//! mixture with conditionally independent coordinates can be estimated
//! nonparametrically, its components labeled, and the observations most
//! likely to come from the exogenous component selected for a second-stage
//! regression. This crate implements that pipeline end to end:
//!
//! - [`kde`]: weighted kernel density estimation and bandwidth rules
//! - [`npem`]: the nonparametric EM mixture estimator
//! - [`labeling`]: component labeling and posterior-threshold selection
//! - [`regress`]: OLS on selected subsets, full-pipeline bootstrap inference,
//!   and fixed-effects regression with store-clustered errors
//! - [`simgen`]: seeded generators for benchmark and pricing-panel data
//! - [`panel`]: scanner-style panel ingestion and wide-matrix assembly
//! - [`report`]: regression tables and JSON result documents

pub mod error;
pub mod kde;
pub mod labeling;
pub mod npem;
pub mod panel;
pub mod regress;
pub mod report;
pub mod simgen;

pub(crate) mod rng;

pub use error::{Error, Result};
pub use kde::{BandwidthRule, WeightedSample};
pub use labeling::{ComponentLabels, Label, LabelRule, SelectionResult};
pub use npem::{
    check_identifiability, npem_fit, posterior_of, CoordinateDensity, DataMatrix, FitOptions,
    Identifiability, InitStrategy, MixtureFit,
};
pub use regress::{FeSpec, FeTable, RegressionResult, SeKind};
