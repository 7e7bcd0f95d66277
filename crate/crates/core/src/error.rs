//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A sample has no spread, so no bandwidth (and no density) can be formed.
    #[error("degenerate sample: {context} has zero spread")]
    DegenerateSample { context: String },

    /// Kernel bandwidth must be a positive finite real.
    #[error("invalid bandwidth {0}: must be positive and finite")]
    InvalidBandwidth(f64),

    /// Every weight in a weighted sample is zero (or the sample is empty).
    #[error("degenerate weights: weight sum must be positive")]
    DegenerateWeights,

    /// Two paired sequences disagree in length.
    #[error("length mismatch: {left_name} has {left} entries, {right_name} has {right}")]
    LengthMismatch {
        left_name: &'static str,
        left: usize,
        right_name: &'static str,
        right: usize,
    },

    /// A configuration value is out of its documented range.
    #[error("invalid options: {0}")]
    InvalidOptions(String),

    /// Not enough observations for the requested estimation.
    #[error("insufficient data: need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// A mixture component lost all of its posterior mass during estimation.
    #[error("component {component} collapsed: posterior mass fell to zero")]
    ComponentCollapsed { component: usize },

    /// Two components tie on the labeling statistic, so no unique labeling exists.
    #[error("ambiguous labeling: components {a} and {b} tie on the {statistic} statistic")]
    AmbiguousLabeling {
        a: usize,
        b: usize,
        statistic: &'static str,
    },

    /// The label rule does not match the fitted component count.
    #[error("label rule arity {rule} does not match component count {components}")]
    RuleArityMismatch { rule: usize, components: usize },

    /// A label was requested that the labeling does not contain.
    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    /// No observation clears the posterior threshold.
    #[error("empty selection: no observation has posterior >= {threshold} for the target component")]
    EmptySelection { threshold: f64 },

    /// The regressor carries no variance, so the slope is unidentified.
    #[error("degenerate regressor: zero variance in x")]
    DegenerateRegressor,

    /// Demeaning absorbed all regressor variation.
    #[error("collinear fixed effects: demeaning drove the regressor to zero variance")]
    CollinearFixedEffects,

    /// More bootstrap replicates failed than the tolerated share.
    #[error("too many failed bootstrap replicates: {failed} of {total}")]
    TooManyFailedReplicates { failed: usize, total: usize },

    /// An iterative routine did not converge within its sweep budget.
    #[error("no convergence after {sweeps} sweeps in {context}")]
    NoConvergence { context: &'static str, sweeps: usize },

    /// A required column is missing from the input schema.
    #[error("schema mismatch: column {column:?} not found")]
    SchemaMismatch { column: String },

    /// Two rows share a key that must be unique.
    #[error("duplicate key: ({key})")]
    DuplicateKey { key: String },

    /// A cell could not be parsed as the expected type.
    #[error("parse error at line {line}, column {column:?}: {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },

    /// A row violates a domain invariant (e.g. non-positive price).
    #[error("invalid row at line {line}: {message}")]
    InvalidRow { line: u64, message: String },

    /// A filter or query produced nothing to work with.
    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 = configuration, 3 = data,
    /// 4 = estimation, 1 = everything else.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            InvalidOptions(_) | RuleArityMismatch { .. } | UnknownLabel(_) => 2,
            SchemaMismatch { .. }
            | DuplicateKey { .. }
            | Parse { .. }
            | InvalidRow { .. }
            | EmptyResult(_)
            | LengthMismatch { .. }
            | Csv(_) => 3,
            DegenerateSample { .. }
            | InvalidBandwidth(_)
            | DegenerateWeights
            | InsufficientData { .. }
            | ComponentCollapsed { .. }
            | AmbiguousLabeling { .. }
            | EmptySelection { .. }
            | DegenerateRegressor
            | CollinearFixedEffects
            | TooManyFailedReplicates { .. }
            | NoConvergence { .. } => 4,
            Io(_) => 1,
        }
    }
}
