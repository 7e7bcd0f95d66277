use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Recover exogenous variation from an endogenous regressor: estimate a
/// nonparametric mixture, label its components, select the likely-exogenous
/// observations, and regress on the selected subset.
#[derive(Parser, Debug)]
#[command(name = "exomix", version, about)]
pub struct Cli {
    /// Master seed for all randomized steps.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Cap the worker thread count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Re-run from a previously emitted config.json; explicit flags override
    /// its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for all output artifacts.
    #[arg(long, global = true, default_value = ".")]
    pub output: PathBuf,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate a seeded dataset.
    Simulate {
        #[command(subcommand)]
        what: SimulateCommand,
    },
    /// Estimate the mixture on a CSV dataset.
    Fit(FitArgs),
    /// Resolve component labels for a saved fit.
    Label(LabelArgs),
    /// Select the rows attributed to a target label.
    Select(SelectArgs),
    /// OLS of an outcome column on a regressor column, optionally restricted
    /// to a saved selection.
    Regress(RegressArgs),
    /// Run estimate -> label -> select -> regress in one pass.
    Pipeline(PipelineArgs),
    /// Demean, filter and widen a long panel for estimation.
    PanelPrep(PanelPrepArgs),
}

#[derive(Subcommand, Debug)]
pub enum SimulateCommand {
    /// Two-component endogenous/exogenous benchmark mixture.
    Mixture(MixtureArgs),
    /// Synthetic three-regime pricing-experiment panel.
    Pricing(PricingArgs),
}

#[derive(Args, Debug)]
pub struct MixtureArgs {
    /// Sample size.
    #[arg(short, long)]
    pub t: Option<usize>,
    /// Exogenous component weight.
    #[arg(long)]
    pub pi: Option<f64>,
    /// True slope.
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Include the latent component and error columns in the CSV.
    #[arg(long)]
    pub emit_latent: bool,
}

#[derive(Args, Debug)]
pub struct PricingArgs {
    #[arg(long)]
    pub stores: Option<usize>,
    #[arg(long)]
    pub weeks: Option<usize>,
    #[arg(long)]
    pub products: Option<usize>,
    /// Control, Hi-Lo, EDLP assignment shares, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub shares: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    pub hilo_shift: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub edlp_shift: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub elasticity: Option<f64>,
    /// Write the latent store-week regimes to truth_labels.csv.
    #[arg(long)]
    pub emit_latent: bool,
}

#[derive(Args, Debug, Clone)]
pub struct FitSettingsArgs {
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// kmeans or random-posterior.
    #[arg(long)]
    pub init: Option<String>,
    /// "silverman" or a fixed positive number.
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// Evaluate densities on a linear-binned grid of this size.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Re-derive each component's bandwidth from its posterior-weighted
    /// sample on every iteration.
    #[arg(long)]
    pub adaptive_bandwidth: bool,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Coordinate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub coords: Option<Vec<String>>,
    /// Number of mixture components.
    #[arg(long)]
    pub components: Option<usize>,
    #[command(flatten)]
    pub settings: FitSettingsArgs,
}

#[derive(Args, Debug, Clone)]
pub struct RuleArgs {
    /// "weight" or "moment".
    #[arg(long)]
    pub rule: Option<String>,
    /// Weight rule: label of the larger-weight component.
    #[arg(long)]
    pub majority: Option<String>,
    /// Weight rule: label of the smaller-weight component.
    #[arg(long)]
    pub minority: Option<String>,
    /// Moment rule: coordinate columns entering the sum (default: all).
    #[arg(long, value_delimiter = ',')]
    pub moment_coords: Option<Vec<String>>,
    /// Moment rule: labels from highest to lowest weighted mean.
    #[arg(long, value_delimiter = ',')]
    pub ordering: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    /// fit.json produced by the fit command.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[command(flatten)]
    pub rule: RuleArgs,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// labels.json produced by the label command.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RegressArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub regressor: Option<String>,
    /// selection.json produced by the select command.
    #[arg(long)]
    pub selection: Option<PathBuf>,
    #[arg(long)]
    pub no_intercept: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SchemaArgs {
    #[arg(long)]
    pub col_category: Option<String>,
    #[arg(long)]
    pub col_zone: Option<String>,
    #[arg(long)]
    pub col_store: Option<String>,
    #[arg(long)]
    pub col_week: Option<String>,
    #[arg(long)]
    pub col_product: Option<String>,
    #[arg(long)]
    pub col_price: Option<String>,
    #[arg(long)]
    pub col_quantity: Option<String>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Vector mode: coordinate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub coords: Option<Vec<String>>,
    /// Vector mode: outcome column.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Vector mode: regressor column (one of the coordinates).
    #[arg(long)]
    pub regressor: Option<String>,
    #[arg(long)]
    pub components: Option<usize>,
    #[command(flatten)]
    pub rule: RuleArgs,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Bootstrap replicate count for the subset slope.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[command(flatten)]
    pub settings: FitSettingsArgs,

    /// Panel mode: treat the input as a long price panel.
    #[arg(long)]
    pub panel: bool,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Panel mode: minimum cross-store price spread for a product to enter.
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    /// Panel mode: cap on the number of product coordinates.
    #[arg(long)]
    pub max_coords: Option<usize>,
    /// Panel mode: consecutive weeks per half of an experiment window.
    #[arg(long)]
    pub window: Option<usize>,
    /// Panel mode: true store-week labels CSV for the accuracy report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PanelPrepArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    #[arg(long)]
    pub max_coords: Option<usize>,
    /// Demeaning group key, comma separated (default zone,week,product).
    #[arg(long, value_delimiter = ',')]
    pub demean: Option<Vec<String>>,
}
