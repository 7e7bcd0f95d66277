//! Flag/file resolution and command execution.

use std::path::{Path, PathBuf};

use serde::Serialize;

use exomix::error::{Error, Result};
use exomix::kde::BandwidthRule;
use exomix::labeling::{self, ComponentLabels, Label, SelectionResult};
use exomix::npem::{self, DataMatrix, Identifiability, InitStrategy};
use exomix::panel::{self, GroupField, MissingPolicy, SchemaMap, WideMatrixSpec};
use exomix::regress::{self, BootstrapConfig, PipelineConfig, RegressionResult, SeKind};
use exomix::report::{regression_table, TableColumn};
use exomix::simgen;

use crate::args::*;
use crate::output::*;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        // Ignore the error if a pool already exists (e.g. repeated init).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    ensure_dir(&cli.output)?;
    let file_job: Option<Job> = match &cli.config {
        Some(path) => Some(read_json(path)?),
        None => None,
    };
    let job = resolve(cli.command, cli.seed, file_job)?;
    write_json(&cli.output, "config.json", &job)?;
    execute(&job, &cli.output)
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn pick_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidOptions(format!("missing required option: {what}")))
}

fn path_string(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn parse_bandwidth(text: &str) -> Result<BandwidthRule> {
    if text.eq_ignore_ascii_case("silverman") {
        return Ok(BandwidthRule::Silverman);
    }
    text.parse::<f64>()
        .map(BandwidthRule::Fixed)
        .map_err(|_| Error::InvalidOptions(format!("bandwidth {text:?}: expected \"silverman\" or a number")))
}

fn parse_init(text: &str) -> Result<InitStrategy> {
    match text.to_ascii_lowercase().replace('-', "_").as_str() {
        "kmeans" => Ok(InitStrategy::KMeans),
        "random_posterior" | "random" => Ok(InitStrategy::RandomPosterior),
        other => Err(Error::InvalidOptions(format!(
            "unknown init strategy {other:?}"
        ))),
    }
}

fn resolve_settings(args: &FitSettingsArgs, file: Option<FitSettings>) -> Result<FitSettings> {
    let defaults = FitSettings::default();
    let file = file.unwrap_or_else(|| defaults.clone());
    Ok(FitSettings {
        max_iterations: pick(args.max_iter, Some(file.max_iterations), defaults.max_iterations),
        tolerance: pick(args.tol, Some(file.tolerance), defaults.tolerance),
        restarts: pick(args.restarts, Some(file.restarts), defaults.restarts),
        init: match &args.init {
            Some(text) => parse_init(text)?,
            None => file.init,
        },
        bandwidth: match &args.bandwidth {
            Some(text) => parse_bandwidth(text)?,
            None => file.bandwidth,
        },
        grid: pick_opt(args.grid, file.grid),
        adaptive_bandwidth: args.adaptive_bandwidth || file.adaptive_bandwidth,
    })
}

fn resolve_rule(args: &RuleArgs, file: Option<RuleJob>) -> Result<RuleJob> {
    let kind = match (&args.rule, &file) {
        (Some(k), _) => k.to_ascii_lowercase(),
        (None, Some(RuleJob::Weight { .. })) => "weight".into(),
        (None, Some(RuleJob::Moment { .. })) => "moment".into(),
        (None, None) => return Err(Error::InvalidOptions("missing required option: --rule".into())),
    };
    match kind.as_str() {
        "weight" => {
            let (file_majority, file_minority) = match file {
                Some(RuleJob::Weight { majority, minority }) => (Some(majority), Some(minority)),
                _ => (None, None),
            };
            Ok(RuleJob::Weight {
                majority: require(
                    pick_opt(args.majority.clone(), file_majority),
                    "--majority",
                )?,
                minority: require(
                    pick_opt(args.minority.clone(), file_minority),
                    "--minority",
                )?,
            })
        }
        "moment" => {
            let (file_coords, file_ordering) = match file {
                Some(RuleJob::Moment {
                    coordinates,
                    ordering,
                }) => (coordinates, Some(ordering)),
                _ => (None, None),
            };
            Ok(RuleJob::Moment {
                coordinates: pick_opt(args.moment_coords.clone(), file_coords),
                ordering: require(
                    pick_opt(args.ordering.clone(), file_ordering),
                    "--ordering",
                )?,
            })
        }
        other => Err(Error::InvalidOptions(format!(
            "unknown label rule {other:?} (expected weight or moment)"
        ))),
    }
}

fn resolve_schema(args: &SchemaArgs, file: Option<SchemaMap>) -> SchemaMap {
    let file = file.unwrap_or_default();
    SchemaMap {
        category: args.col_category.clone().unwrap_or(file.category),
        zone: args.col_zone.clone().unwrap_or(file.zone),
        store: args.col_store.clone().unwrap_or(file.store),
        week: args.col_week.clone().unwrap_or(file.week),
        product: args.col_product.clone().unwrap_or(file.product),
        price: args.col_price.clone().unwrap_or(file.price),
        quantity: args.col_quantity.clone().unwrap_or(file.quantity),
    }
}

fn resolve(command: Option<Command>, seed_flag: Option<u64>, file: Option<Job>) -> Result<Job> {
    let command = match command {
        Some(c) => c,
        None => {
            let mut job = file.ok_or_else(|| {
                Error::InvalidOptions("no command given and no --config to run from".into())
            })?;
            if let Some(seed) = seed_flag {
                set_seed(&mut job, seed);
            }
            return Ok(job);
        }
    };

    let mismatch = |expected: &str, got: &Job| {
        Error::InvalidOptions(format!(
            "--config describes {:?} but the command line asks for {expected:?}",
            got.name()
        ))
    };

    match command {
        Command::Simulate {
            what: SimulateCommand::Mixture(args),
        } => {
            let f = match file {
                None => None,
                Some(Job::SimulateMixture(j)) => Some(j),
                Some(other) => return Err(mismatch("simulate mixture", &other)),
            };
            Ok(Job::SimulateMixture(MixtureJob {
                t: pick(args.t, f.as_ref().map(|j| j.t), 2000),
                pi: pick(args.pi, f.as_ref().map(|j| j.pi), 0.6),
                beta: pick(args.beta, f.as_ref().map(|j| j.beta), 2.0),
                seed: pick(seed_flag, f.as_ref().map(|j| j.seed), 0),
                emit_latent: args.emit_latent || f.as_ref().is_some_and(|j| j.emit_latent),
            }))
        }
        Command::Simulate {
            what: SimulateCommand::Pricing(args),
        } => {
            let f = match file {
                None => None,
                Some(Job::SimulatePricing(j)) => Some(j),
                Some(other) => return Err(mismatch("simulate pricing", &other)),
            };
            let defaults = simgen::PricingSimConfig::default();
            let shares = match args.shares {
                Some(v) => {
                    if v.len() != 3 {
                        return Err(Error::InvalidOptions(
                            "--shares needs exactly three values".into(),
                        ));
                    }
                    [v[0], v[1], v[2]]
                }
                None => f.as_ref().map(|j| j.shares).unwrap_or(defaults.treatment_shares),
            };
            Ok(Job::SimulatePricing(PricingJob {
                stores: pick(args.stores, f.as_ref().map(|j| j.stores), defaults.n_stores),
                weeks: pick(args.weeks, f.as_ref().map(|j| j.weeks), defaults.n_weeks),
                products: pick(
                    args.products,
                    f.as_ref().map(|j| j.products),
                    defaults.n_products,
                ),
                shares,
                hilo_shift: pick(
                    args.hilo_shift,
                    f.as_ref().map(|j| j.hilo_shift),
                    defaults.hilo_shift,
                ),
                edlp_shift: pick(
                    args.edlp_shift,
                    f.as_ref().map(|j| j.edlp_shift),
                    defaults.edlp_shift,
                ),
                noise_sd: pick(
                    args.noise_sd,
                    f.as_ref().map(|j| j.noise_sd),
                    defaults.noise_sd,
                ),
                elasticity: pick(
                    args.elasticity,
                    f.as_ref().map(|j| j.elasticity),
                    defaults.elasticity,
                ),
                seed: pick(seed_flag, f.as_ref().map(|j| j.seed), 0),
                emit_latent: args.emit_latent || f.as_ref().is_some_and(|j| j.emit_latent),
            }))
        }
        Command::Fit(args) => {
            let f = match file {
                None => None,
                Some(Job::Fit(j)) => Some(j),
                Some(other) => return Err(mismatch("fit", &other)),
            };
            Ok(Job::Fit(FitJob {
                input: require(
                    pick_opt(path_string(args.input), f.as_ref().map(|j| j.input.clone())),
                    "--input",
                )?,
                coords: require(
                    pick_opt(args.coords.clone(), f.as_ref().map(|j| j.coords.clone())),
                    "--coords",
                )?,
                components: pick(args.components, f.as_ref().map(|j| j.components), 2),
                seed: pick(seed_flag, f.as_ref().map(|j| j.seed), 0),
                settings: resolve_settings(&args.settings, f.map(|j| j.settings))?,
            }))
        }
        Command::Label(args) => {
            let f = match file {
                None => None,
                Some(Job::Label(j)) => Some(j),
                Some(other) => return Err(mismatch("label", &other)),
            };
            Ok(Job::Label(LabelJob {
                fit: require(
                    pick_opt(path_string(args.fit), f.as_ref().map(|j| j.fit.clone())),
                    "--fit",
                )?,
                rule: resolve_rule(&args.rule, f.map(|j| j.rule))?,
            }))
        }
        Command::Select(args) => {
            let f = match file {
                None => None,
                Some(Job::Select(j)) => Some(j),
                Some(other) => return Err(mismatch("select", &other)),
            };
            Ok(Job::Select(SelectJob {
                fit: require(
                    pick_opt(path_string(args.fit), f.as_ref().map(|j| j.fit.clone())),
                    "--fit",
                )?,
                labels: require(
                    pick_opt(path_string(args.labels), f.as_ref().map(|j| j.labels.clone())),
                    "--labels",
                )?,
                target: require(
                    pick_opt(args.target.clone(), f.as_ref().map(|j| j.target.clone())),
                    "--target",
                )?,
                threshold: pick(args.threshold, f.as_ref().map(|j| j.threshold), 0.9),
            }))
        }
        Command::Regress(args) => {
            let f = match file {
                None => None,
                Some(Job::Regress(j)) => Some(j),
                Some(other) => return Err(mismatch("regress", &other)),
            };
            Ok(Job::Regress(RegressJob {
                input: require(
                    pick_opt(path_string(args.input), f.as_ref().map(|j| j.input.clone())),
                    "--input",
                )?,
                outcome: require(
                    pick_opt(args.outcome.clone(), f.as_ref().map(|j| j.outcome.clone())),
                    "--outcome",
                )?,
                regressor: require(
                    pick_opt(args.regressor.clone(), f.as_ref().map(|j| j.regressor.clone())),
                    "--regressor",
                )?,
                intercept: if args.no_intercept {
                    false
                } else {
                    f.as_ref().map(|j| j.intercept).unwrap_or(true)
                },
                selection: pick_opt(
                    path_string(args.selection),
                    f.and_then(|j| j.selection),
                ),
            }))
        }
        Command::Pipeline(args) => {
            let f = match file {
                None => None,
                Some(Job::Pipeline(j)) => Some(j),
                Some(other) => return Err(mismatch("pipeline", &other)),
            };
            Ok(Job::Pipeline(PipelineJob {
                input: require(
                    pick_opt(path_string(args.input), f.as_ref().map(|j| j.input.clone())),
                    "--input",
                )?,
                panel: args.panel || f.as_ref().is_some_and(|j| j.panel),
                components: pick(
                    args.components,
                    f.as_ref().map(|j| j.components),
                    if args.panel { 3 } else { 2 },
                ),
                rule: resolve_rule(&args.rule, f.as_ref().map(|j| j.rule.clone()))?,
                threshold: pick(args.threshold, f.as_ref().map(|j| j.threshold), 0.9),
                seed: pick(seed_flag, f.as_ref().map(|j| j.seed), 0),
                settings: resolve_settings(
                    &args.settings,
                    f.as_ref().map(|j| j.settings.clone()),
                )?,
                coords: pick_opt(args.coords.clone(), f.as_ref().and_then(|j| j.coords.clone())),
                outcome: pick_opt(
                    args.outcome.clone(),
                    f.as_ref().and_then(|j| j.outcome.clone()),
                ),
                regressor: pick_opt(
                    args.regressor.clone(),
                    f.as_ref().and_then(|j| j.regressor.clone()),
                ),
                target: pick_opt(args.target.clone(), f.as_ref().and_then(|j| j.target.clone())),
                bootstrap: pick_opt(args.bootstrap, f.as_ref().and_then(|j| j.bootstrap)),
                schema: resolve_schema(&args.schema, f.as_ref().map(|j| j.schema.clone())),
                filter_threshold: pick(
                    args.filter_threshold,
                    f.as_ref().map(|j| j.filter_threshold),
                    0.03,
                ),
                max_coords: pick_opt(args.max_coords, f.as_ref().and_then(|j| j.max_coords)),
                window: pick(args.window, f.as_ref().map(|j| j.window), 6),
                truth: pick_opt(path_string(args.truth), f.and_then(|j| j.truth)),
            }))
        }
        Command::PanelPrep(args) => {
            let f = match file {
                None => None,
                Some(Job::PanelPrep(j)) => Some(j),
                Some(other) => return Err(mismatch("panel-prep", &other)),
            };
            Ok(Job::PanelPrep(PanelPrepJob {
                input: require(
                    pick_opt(path_string(args.input), f.as_ref().map(|j| j.input.clone())),
                    "--input",
                )?,
                schema: resolve_schema(&args.schema, f.as_ref().map(|j| j.schema.clone())),
                filter_threshold: pick(
                    args.filter_threshold,
                    f.as_ref().map(|j| j.filter_threshold),
                    0.03,
                ),
                max_coords: pick_opt(args.max_coords, f.as_ref().and_then(|j| j.max_coords)),
                demean: pick(
                    args.demean,
                    f.map(|j| j.demean),
                    vec!["zone".into(), "week".into(), "product".into()],
                ),
            }))
        }
    }
}

fn set_seed(job: &mut Job, seed: u64) {
    match job {
        Job::SimulateMixture(j) => j.seed = seed,
        Job::SimulatePricing(j) => j.seed = seed,
        Job::Fit(j) => j.seed = seed,
        Job::Pipeline(j) => j.seed = seed,
        Job::Label(_) | Job::Select(_) | Job::Regress(_) | Job::PanelPrep(_) => {}
    }
}

fn execute(job: &Job, out: &Path) -> Result<()> {
    match job {
        Job::SimulateMixture(j) => exec_simulate_mixture(j, out),
        Job::SimulatePricing(j) => exec_simulate_pricing(j, out),
        Job::Fit(j) => exec_fit(j, out),
        Job::Label(j) => exec_label(j, out),
        Job::Select(j) => exec_select(j, out),
        Job::Regress(j) => exec_regress(j, out),
        Job::Pipeline(j) if j.panel => exec_pipeline_panel(j, out),
        Job::Pipeline(j) => exec_pipeline_vector(j, out),
        Job::PanelPrep(j) => exec_panel_prep(j, out),
    }
}

fn exec_simulate_mixture(job: &MixtureJob, out: &Path) -> Result<()> {
    let sim = simgen::simulate_mixture(&simgen::MixtureSimConfig {
        t: job.t,
        pi: job.pi,
        beta: job.beta,
        seed: job.seed,
    })?;
    write_mixture_csv(out, "mixture.csv", &sim, job.emit_latent)
}

fn exec_simulate_pricing(job: &PricingJob, out: &Path) -> Result<()> {
    let sim = simgen::simulate_pricing(&simgen::PricingSimConfig {
        n_stores: job.stores,
        n_weeks: job.weeks,
        n_products: job.products,
        treatment_shares: job.shares,
        hilo_shift: job.hilo_shift,
        edlp_shift: job.edlp_shift,
        noise_sd: job.noise_sd,
        elasticity: job.elasticity,
        seed: job.seed,
    })?;
    let file = std::fs::File::create(out.join("pricing.csv"))?;
    panel::write_panel(&sim.panel, file)?;
    if job.emit_latent {
        write_store_week_labels(out, "truth_labels.csv", &sim.truth)?;
    }
    Ok(())
}

fn warn_if_unidentified(m: usize, r: usize) {
    if npem::check_identifiability(m, r) == Identifiability::Violated {
        eprintln!(
            "warning: identifiability condition 2^{r} - 1 >= {m}*{r} + 1 is violated for \
             {m} components on {r} coordinates; estimation proceeds anyway"
        );
    }
}

fn exec_fit(job: &FitJob, out: &Path) -> Result<()> {
    let columns = load_columns(Path::new(&job.input), &job.coords)?;
    let n = columns[0].len();
    let mut values = Vec::with_capacity(n * columns.len());
    for i in 0..n {
        for col in &columns {
            values.push(col[i]);
        }
    }
    let data = DataMatrix::new(n, columns.len(), values)?;
    warn_if_unidentified(job.components, data.ncols());
    let options = job.settings.to_options(job.seed);
    let fit = npem::npem_fit(&data, job.components, &options)?;
    let doc = FitDocument::from_fit(&fit, job.clone());
    write_json(out, "fit.json", &doc)?;
    write_density_curves(out, "density_curves.csv", &fit, &job.coords, 512)
}

fn exec_label(job: &LabelJob, out: &Path) -> Result<()> {
    let doc: FitDocument = read_json(Path::new(&job.fit))?;
    let fit = doc.to_fit()?;
    let rule = job.rule.resolve(&doc.coordinates)?;
    let labels = labeling::label_components(&fit, &rule)?;
    let labels_doc = LabelsDocument {
        fit: job.fit.clone(),
        rule: job.rule.clone(),
        assignment: labels.labels().iter().map(|l| l.as_str().to_string()).collect(),
    };
    write_json(out, "labels.json", &labels_doc)
}

fn exec_select(job: &SelectJob, out: &Path) -> Result<()> {
    let fit_doc: FitDocument = read_json(Path::new(&job.fit))?;
    let labels_doc: LabelsDocument = read_json(Path::new(&job.labels))?;
    let fit = fit_doc.to_fit()?;
    let labels = ComponentLabels::new(
        labels_doc.assignment.iter().map(Label::new).collect(),
    )?;
    let selection = labeling::select_subset(&fit, &labels, &Label::new(&job.target), job.threshold)?;
    let doc = SelectionDocument {
        fit: job.fit.clone(),
        labels: job.labels.clone(),
        target: job.target.clone(),
        threshold: job.threshold,
        n_selected: selection.len(),
        indices: selection.indices,
        target_posteriors: selection.target_posteriors,
    };
    write_json(out, "selection.json", &doc)
}

#[derive(Serialize)]
struct RegressDocument<'a> {
    config: &'a RegressJob,
    regression: &'a RegressionResult,
}

fn exec_regress(job: &RegressJob, out: &Path) -> Result<()> {
    let columns = load_columns(
        Path::new(&job.input),
        &[job.outcome.clone(), job.regressor.clone()],
    )?;
    let (y, x) = (&columns[0], &columns[1]);
    let regression = match &job.selection {
        None => regress::ols(y, x, job.intercept)?,
        Some(path) => {
            let doc: SelectionDocument = read_json(Path::new(path))?;
            let selection = SelectionResult {
                indices: doc.indices,
                threshold: doc.threshold,
                target_posteriors: doc.target_posteriors,
            };
            regress::ols_on_subset(y, x, &selection, job.intercept)?
        }
    }
    .with_term_name("x", &job.regressor);
    write_json(out, "regression.json", &RegressDocument { config: job, regression: &regression })?;
    let table = regression_table(&[TableColumn::new(job.outcome.clone(), &regression)]);
    write_text(out, "regression.txt", &table)
}

#[derive(Serialize)]
struct FitSummary {
    weights: Vec<f64>,
    bandwidths: Vec<f64>,
    converged: bool,
    iterations_run: usize,
    identifiability: Identifiability,
}

impl FitSummary {
    fn new(fit: &npem::MixtureFit) -> Self {
        Self {
            weights: fit.weights().to_vec(),
            bandwidths: fit.bandwidths().map(|b| b.to_vec()).unwrap_or_default(),
            converged: fit.converged(),
            iterations_run: fit.iterations_run(),
            identifiability: npem::check_identifiability(fit.n_components(), fit.n_coords()),
        }
    }
}

#[derive(Serialize)]
struct VectorPipelineDocument<'a> {
    config: &'a PipelineJob,
    fit: FitSummary,
    labels: Vec<String>,
    n_selected: usize,
    full_sample: RegressionResult,
    subset: RegressionResult,
    bootstrap: Option<regress::BootstrapResult>,
}

fn exec_pipeline_vector(job: &PipelineJob, out: &Path) -> Result<()> {
    let coords = require(job.coords.clone(), "--coords")?;
    let outcome_name = require(job.outcome.clone(), "--outcome")?;
    let regressor_name = require(job.regressor.clone(), "--regressor")?;
    let target = require(job.target.clone(), "--target")?;
    let regressor_coordinate = coords
        .iter()
        .position(|c| c == &regressor_name)
        .ok_or_else(|| Error::InvalidOptions(format!(
            "regressor {regressor_name:?} must be one of the coordinates"
        )))?;

    let mut wanted = coords.clone();
    wanted.push(outcome_name.clone());
    let columns = load_columns(Path::new(&job.input), &wanted)?;
    let y = columns.last().unwrap().clone();
    let n = y.len();
    let mut values = Vec::with_capacity(n * coords.len());
    for i in 0..n {
        for col in &columns[..coords.len()] {
            values.push(col[i]);
        }
    }
    let data = DataMatrix::new(n, coords.len(), values)?;
    warn_if_unidentified(job.components, data.ncols());

    let pipeline_config = PipelineConfig {
        components: job.components,
        fit: job.settings.to_options(job.seed),
        rule: job.rule.resolve(&coords)?,
        target: Label::new(&target),
        threshold: job.threshold,
        regressor_coordinate,
    };
    let run = regress::run_pipeline(&data, &y, &pipeline_config)?;
    let x = data.column(regressor_coordinate);
    let full = regress::ols(&y, &x, true)?.with_term_name("x", &regressor_name);
    let subset = run.regression.clone().with_term_name("x", &regressor_name);

    let bootstrap = match job.bootstrap {
        None => None,
        Some(replicates) => Some(regress::bootstrap_pipeline(
            &data,
            &y,
            &BootstrapConfig {
                pipeline: pipeline_config.clone(),
                replicates,
                seed: job.seed,
            },
        )?),
    };

    // Journal-style table: full-sample column, then the selected subset with
    // bootstrapped errors when available.
    let mut display_subset = subset.clone();
    if let Some(b) = &bootstrap {
        for term in &mut display_subset.terms {
            if term.name == regressor_name {
                term.std_error = b.se;
            }
        }
        display_subset.se_kind = SeKind::Bootstrap {
            replicates: b.replicates_used,
        };
        display_subset.terms.retain(|t| t.name == regressor_name);
    }
    let mut col_subset = TableColumn::new(format!("{outcome_name}_sel"), &display_subset);
    col_subset.display_terms = display_subset
        .terms
        .iter()
        .map(|t| {
            if t.name == regressor_name {
                (t.name.clone(), format!("{regressor_name}_sel"))
            } else {
                (t.name.clone(), t.name.clone())
            }
        })
        .collect();
    let table = regression_table(&[
        TableColumn::new(outcome_name.clone(), &full),
        col_subset,
    ]);
    write_text(out, "table.txt", &table)?;

    let doc = VectorPipelineDocument {
        config: job,
        fit: FitSummary::new(&run.fit),
        labels: run
            .labels
            .labels()
            .iter()
            .map(|l| l.as_str().to_string())
            .collect(),
        n_selected: run.selection.len(),
        full_sample: full,
        subset,
        bootstrap,
    };
    write_json(out, "results.json", &doc)
}

#[derive(Serialize)]
struct GroupSummary {
    zone: String,
    category: String,
    coordinates: Vec<String>,
    n_units: usize,
    dropped_stores: Vec<String>,
    fit: FitSummary,
    assignment: Vec<String>,
}

#[derive(Serialize)]
struct ElasticityRow {
    category: String,
    n_pairs: usize,
    unmatched: Vec<String>,
    estimate: Option<f64>,
    std_error: Option<f64>,
    n_used: Option<usize>,
    error: Option<String>,
}

#[derive(Serialize)]
struct PanelPipelineDocument<'a> {
    config: &'a PipelineJob,
    groups: Vec<GroupSummary>,
    price_changes: regress::PriceChangeReport,
    elasticities: Vec<ElasticityRow>,
    accuracy: Option<labeling::AccuracyReport>,
}

fn exec_pipeline_panel(job: &PipelineJob, out: &Path) -> Result<()> {
    let file = std::fs::File::open(&job.input)?;
    let raw = panel::load_panel(file, &job.schema)?;

    let ordering = match &job.rule {
        RuleJob::Moment { ordering, .. } => ordering.clone(),
        RuleJob::Weight { .. } => {
            return Err(Error::InvalidOptions(
                "panel pipelines label by the moment rule; pass --rule moment".into(),
            ))
        }
    };

    let mut groups = Vec::new();
    let mut predicted = exomix::regress::StoreWeekLabels::new();
    for zone in raw.zones() {
        for category in raw.categories() {
            let slice_rows: Vec<panel::PanelRow> = raw
                .rows()
                .iter()
                .filter(|r| r.zone == zone && r.category == category)
                .cloned()
                .collect();
            if slice_rows.is_empty() {
                continue;
            }
            let slice = panel::PanelTable::new(slice_rows)?;
            let slice = panel::log_demean(&slice, &panel::default_demean_key())?;
            let mut products = panel::filter_products(&slice, job.filter_threshold, None)?;
            if let Some(cap) = job.max_coords {
                products.truncate(cap);
            }
            let spec = WideMatrixSpec {
                zone: Some(zone.clone()),
                category: Some(category.clone()),
                coordinates: products,
            };
            let assembly = panel::to_matrix(&slice, &spec, MissingPolicy::DropUnit)?;
            for store in &assembly.dropped_stores {
                eprintln!(
                    "notice: store {store} misses more than 15% of observed weeks in \
                     zone {zone}, category {category}; excluded"
                );
            }
            warn_if_unidentified(job.components, assembly.matrix.ncols());

            let options = job.settings.to_options(job.seed);
            let fit = npem::npem_fit(&assembly.matrix, job.components, &options)?;
            let rule = exomix::labeling::LabelRule::MomentOrder {
                coordinates: (0..assembly.matrix.ncols()).collect(),
                ordering: ordering.iter().map(Label::new).collect(),
            };
            let labels = labeling::label_components(&fit, &rule)?;
            let assigned = labeling::assign_argmax_labels(&fit, &labels)?;
            for (unit, label) in assembly.units.iter().zip(&assigned) {
                predicted.insert(
                    (category.clone(), unit.store.clone(), unit.week),
                    label.clone(),
                );
            }
            groups.push(GroupSummary {
                zone: zone.clone(),
                category: category.clone(),
                coordinates: assembly.coordinates.clone(),
                n_units: assembly.units.len(),
                dropped_stores: assembly.dropped_stores.clone(),
                fit: FitSummary::new(&fit),
                assignment: labels
                    .labels()
                    .iter()
                    .map(|l| l.as_str().to_string())
                    .collect(),
            });
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyResult("panel has no (zone, category) groups".into()));
    }

    write_store_week_labels(out, "store_week_labels.csv", &predicted)?;

    let control = Label::control();
    let price_changes = regress::price_change_report(&raw, &predicted, job.window, &control)?;
    write_text(out, "price_changes.txt", &price_change_text(&price_changes))?;

    let did_tables = regress::assemble_did_tables(&raw, &predicted, job.window, &control)?;
    let spec = regress::did_spec();
    let mut elasticities = Vec::new();
    for did in &did_tables {
        let row = match regress::fe_regression(&did.table, &spec) {
            Ok(result) => ElasticityRow {
                category: did.category.clone(),
                n_pairs: did.n_pairs,
                unmatched: did.unmatched.clone(),
                estimate: result.coefficient("log_price"),
                std_error: result.std_error("log_price"),
                n_used: Some(result.n_used),
                error: None,
            },
            Err(e) => ElasticityRow {
                category: did.category.clone(),
                n_pairs: did.n_pairs,
                unmatched: did.unmatched.clone(),
                estimate: None,
                std_error: None,
                n_used: None,
                error: Some(e.to_string()),
            },
        };
        elasticities.push(row);
    }
    write_text(out, "elasticity.txt", &elasticity_text(&elasticities))?;

    let accuracy = match &job.truth {
        None => None,
        Some(path) => {
            let truth = load_store_week_labels(Path::new(path))?;
            let mut pred_vec = Vec::new();
            let mut truth_vec = Vec::new();
            let mut group_vec = Vec::new();
            for (key, label) in &predicted {
                if let Some(t) = truth.get(key) {
                    pred_vec.push(label.clone());
                    truth_vec.push(t.clone());
                    group_vec.push(key.0.clone());
                }
            }
            let report = labeling::accuracy_report(&pred_vec, &truth_vec, Some(&group_vec))?;
            write_text(out, "accuracy.txt", &accuracy_text(&report))?;
            Some(report)
        }
    };

    let doc = PanelPipelineDocument {
        config: job,
        groups,
        price_changes,
        elasticities,
        accuracy,
    };
    write_json(out, "results.json", &doc)
}

fn price_change_text(report: &regress::PriceChangeReport) -> String {
    let mut lines = Vec::new();
    lines.push(format!(
        "Recovered mean log-price changes (percent), {}+{}-week windows",
        report.window, report.window
    ));
    lines.push(String::new());
    lines.push(format!("{:<20} {:<10} {:>12} {:>10}", "Category", "Regime", "Recovered", "Windows"));
    lines.push("-".repeat(56));
    for cat in &report.categories {
        if cat.changes.is_empty() {
            lines.push(format!("{:<20} {:<10} {:>12} {:>10}", cat.category, "-", "NA", 0));
        }
        for (regime, change, windows) in &cat.changes {
            let value = match change {
                Some(v) => format!("{v:.3}"),
                None => "NA".to_string(),
            };
            lines.push(format!(
                "{:<20} {:<10} {:>12} {:>10}",
                cat.category,
                regime.as_str(),
                value,
                windows
            ));
        }
    }
    lines.push(String::new());
    lines.join("\n")
}

fn elasticity_text(rows: &[ElasticityRow]) -> String {
    let mut lines = Vec::new();
    lines.push("Demand elasticities from recovered experiment windows".to_string());
    lines.push("(difference-in-difference, errors clustered by store)".to_string());
    lines.push(String::new());
    lines.push(format!(
        "{:<20} {:>12} {:>12} {:>8} {:>8}",
        "Category", "Recovered", "(SE)", "Pairs", "Obs"
    ));
    lines.push("-".repeat(64));
    for row in rows {
        match (row.estimate, row.std_error) {
            (Some(b), Some(se)) => {
                let p = exomix::report::two_sided_p(b / se);
                lines.push(format!(
                    "{:<20} {:>12} {:>12} {:>8} {:>8}",
                    row.category,
                    format!("{:.3}{}", b, exomix::report::stars(p)),
                    format!("({se:.3})"),
                    row.n_pairs,
                    row.n_used.unwrap_or(0)
                ));
            }
            _ => {
                lines.push(format!(
                    "{:<20} {:>12} {:>12} {:>8} {:>8}",
                    row.category,
                    "NA",
                    row.error.as_deref().unwrap_or("-"),
                    row.n_pairs,
                    0
                ));
            }
        }
        if !row.unmatched.is_empty() {
            lines.push(format!(
                "{:<20}   unmatched stores: {}",
                "",
                row.unmatched.join(", ")
            ));
        }
    }
    lines.push(String::new());
    lines.push("Note: *p<0.1; **p<0.05; ***p<0.01".to_string());
    lines.push(String::new());
    lines.join("\n")
}

fn accuracy_text(report: &labeling::AccuracyReport) -> String {
    let mut lines = Vec::new();
    lines.push("Recovered store-week label accuracy".to_string());
    lines.push(String::new());
    lines.push(format!(
        "{:<20} {:>14} {:>10} {:>10}",
        "Category", "# Store-Weeks", "# Correct", "Accuracy"
    ));
    lines.push("-".repeat(58));
    for (name, row) in &report.groups {
        lines.push(format!(
            "{:<20} {:>14} {:>10} {:>10.3}",
            name, row.n_rows, row.n_correct, row.accuracy
        ));
    }
    lines.push("-".repeat(58));
    lines.push(format!(
        "{:<20} {:>14} {:>10} {:>10.3}",
        "Overall", report.overall.n_rows, report.overall.n_correct, report.overall.accuracy
    ));
    lines.push(String::new());
    lines.join("\n")
}

#[derive(Serialize)]
struct PanelPrepDocument<'a> {
    config: &'a PanelPrepJob,
    products: Vec<String>,
    cap_applied: bool,
    n_units: usize,
    dropped_stores: Vec<String>,
    dropped_units: usize,
}

fn exec_panel_prep(job: &PanelPrepJob, out: &Path) -> Result<()> {
    let file = std::fs::File::open(&job.input)?;
    let raw = panel::load_panel(file, &job.schema)?;
    let key: Vec<GroupField> = job
        .demean
        .iter()
        .map(|name| GroupField::parse(name))
        .collect::<Result<_>>()?;
    let demeaned = panel::log_demean(&raw, &key)?;

    let mut products = panel::filter_products(&demeaned, job.filter_threshold, None)?;
    let cap_applied = job.max_coords.is_some_and(|cap| products.len() > cap);
    if let Some(cap) = job.max_coords {
        products.truncate(cap);
    }
    let spec = WideMatrixSpec {
        zone: None,
        category: None,
        coordinates: products.clone(),
    };
    let assembly = panel::to_matrix(&demeaned, &spec, MissingPolicy::DropUnit)?;
    for store in &assembly.dropped_stores {
        eprintln!("notice: store {store} misses more than 15% of observed weeks; excluded");
    }

    let demeaned_file = std::fs::File::create(out.join("demeaned.csv"))?;
    panel::write_panel(&demeaned, demeaned_file)?;
    write_matrix_csv(out, "matrix.csv", &assembly)?;
    write_json(
        out,
        "prep.json",
        &PanelPrepDocument {
            config: job,
            products,
            cap_applied,
            n_units: assembly.units.len(),
            dropped_stores: assembly.dropped_stores.clone(),
            dropped_units: assembly.dropped_units,
        },
    )
}
