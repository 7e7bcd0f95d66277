//! Resolved job descriptions (what config.json stores), artifact documents,
//! and deterministic file writers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use exomix::error::{Error, Result};
use exomix::kde::BandwidthRule;
use exomix::labeling::Label;
use exomix::npem::{DataMatrix, FitOptions, InitStrategy, MixtureFit};
use exomix::panel::{format_float, SchemaMap};
use exomix::regress::StoreWeekLabels;

/// A fully resolved command, reproducible from its JSON form. Output
/// locations and thread counts are intentionally not part of it.
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "command", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)]
pub enum Job {
    SimulateMixture(MixtureJob),
    SimulatePricing(PricingJob),
    Fit(FitJob),
    Label(LabelJob),
    Select(SelectJob),
    Regress(RegressJob),
    Pipeline(PipelineJob),
    PanelPrep(PanelPrepJob),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::SimulateMixture(_) => "simulate mixture",
            Job::SimulatePricing(_) => "simulate pricing",
            Job::Fit(_) => "fit",
            Job::Label(_) => "label",
            Job::Select(_) => "select",
            Job::Regress(_) => "regress",
            Job::Pipeline(_) => "pipeline",
            Job::PanelPrep(_) => "panel-prep",
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct MixtureJob {
    pub t: usize,
    pub pi: f64,
    pub beta: f64,
    pub seed: u64,
    pub emit_latent: bool,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct PricingJob {
    pub stores: usize,
    pub weeks: usize,
    pub products: usize,
    pub shares: [f64; 3],
    pub hilo_shift: f64,
    pub edlp_shift: f64,
    pub noise_sd: f64,
    pub elasticity: f64,
    pub seed: u64,
    pub emit_latent: bool,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct FitSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub restarts: usize,
    pub init: InitStrategy,
    pub bandwidth: BandwidthRule,
    pub grid: Option<usize>,
    #[serde(default)]
    pub adaptive_bandwidth: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        let defaults = FitOptions::default();
        Self {
            max_iterations: defaults.max_iterations,
            tolerance: defaults.tolerance,
            restarts: defaults.restarts,
            init: defaults.init,
            bandwidth: defaults.bandwidth_rule,
            grid: None,
            adaptive_bandwidth: false,
        }
    }
}

impl FitSettings {
    pub fn to_options(&self, seed: u64) -> FitOptions {
        FitOptions {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            restarts: self.restarts,
            init: self.init,
            seed,
            bandwidth_rule: self.bandwidth,
            density_grid: self.grid,
            adaptive_bandwidth: self.adaptive_bandwidth,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct FitJob {
    pub input: String,
    pub coords: Vec<String>,
    pub components: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub settings: FitSettings,
}

/// Label rule with coordinates referenced by column name; resolved against
/// the fit's coordinate list at run time.
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleJob {
    Weight {
        majority: String,
        minority: String,
    },
    Moment {
        /// Columns entering the summed moment; None means all coordinates.
        coordinates: Option<Vec<String>>,
        /// Labels from highest to lowest weighted mean.
        ordering: Vec<String>,
    },
}

impl RuleJob {
    pub fn resolve(&self, fit_coords: &[String]) -> Result<exomix::labeling::LabelRule> {
        match self {
            RuleJob::Weight { majority, minority } => Ok(exomix::labeling::LabelRule::WeightOrder {
                majority_label: Label::new(majority.clone()),
                minority_label: Label::new(minority.clone()),
            }),
            RuleJob::Moment {
                coordinates,
                ordering,
            } => {
                let indices: Vec<usize> = match coordinates {
                    None => (0..fit_coords.len()).collect(),
                    Some(names) => names
                        .iter()
                        .map(|name| {
                            fit_coords.iter().position(|c| c == name).ok_or_else(|| {
                                Error::SchemaMismatch {
                                    column: name.clone(),
                                }
                            })
                        })
                        .collect::<Result<_>>()?,
                };
                Ok(exomix::labeling::LabelRule::MomentOrder {
                    coordinates: indices,
                    ordering: ordering.iter().map(|l| Label::new(l.clone())).collect(),
                })
            }
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct LabelJob {
    pub fit: String,
    pub rule: RuleJob,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct SelectJob {
    pub fit: String,
    pub labels: String,
    pub target: String,
    pub threshold: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct RegressJob {
    pub input: String,
    pub outcome: String,
    pub regressor: String,
    pub intercept: bool,
    pub selection: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct PipelineJob {
    pub input: String,
    pub panel: bool,
    pub components: usize,
    pub rule: RuleJob,
    pub threshold: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub settings: FitSettings,
    // Vector mode.
    pub coords: Option<Vec<String>>,
    pub outcome: Option<String>,
    pub regressor: Option<String>,
    pub target: Option<String>,
    pub bootstrap: Option<usize>,
    // Panel mode.
    pub schema: SchemaMap,
    pub filter_threshold: f64,
    pub max_coords: Option<usize>,
    pub window: usize,
    pub truth: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct PanelPrepJob {
    pub input: String,
    pub schema: SchemaMap,
    pub filter_threshold: f64,
    pub max_coords: Option<usize>,
    pub demean: Vec<String>,
}

/// Serialized mixture fit: self-contained, so labeling and selection can run
/// from this document alone.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct FitDocument {
    /// The resolved job that produced this fit.
    pub config: FitJob,
    pub coordinates: Vec<String>,
    pub identifiability: exomix::npem::Identifiability,
    pub converged: bool,
    pub iterations_run: usize,
    pub weights: Vec<f64>,
    /// Pooled per-coordinate bandwidths (the reference rule).
    pub bandwidths: Vec<f64>,
    /// Bandwidth actually carried by each density handle, m x r. Differs
    /// from the pooled row only under adaptive bandwidths.
    pub density_bandwidths: Vec<Vec<f64>>,
    pub loglik_trace: Vec<f64>,
    pub n_rows: usize,
    /// Training rows, n x r.
    pub data: Vec<Vec<f64>>,
    /// Posterior matrix, n x m.
    pub posteriors: Vec<Vec<f64>>,
    /// Density weight columns, m x n.
    pub density_weights: Vec<Vec<f64>>,
}

impl FitDocument {
    pub fn from_fit(fit: &MixtureFit, config: FitJob) -> Self {
        let n = fit.n_rows();
        let m = fit.n_components();
        let data = (0..n).map(|i| fit.data().row(i).to_vec()).collect();
        let posteriors = (0..n).map(|i| fit.posterior_row(i).to_vec()).collect();
        let density_weights = (0..m)
            .map(|j| {
                fit.density(j, 0)
                    .sample()
                    .expect("estimated fits carry weighted samples")
                    .weights()
                    .to_vec()
            })
            .collect();
        let density_bandwidths = (0..m)
            .map(|j| {
                (0..fit.n_coords())
                    .map(|k| {
                        fit.density(j, k)
                            .bandwidth()
                            .expect("estimated fits carry kernel densities")
                    })
                    .collect()
            })
            .collect();
        let coordinates = config.coords.clone();
        Self {
            coordinates,
            identifiability: exomix::npem::check_identifiability(m, fit.n_coords()),
            converged: fit.converged(),
            iterations_run: fit.iterations_run(),
            weights: fit.weights().to_vec(),
            bandwidths: fit.bandwidths().expect("estimated fits have bandwidths").to_vec(),
            density_bandwidths,
            loglik_trace: fit.loglik_trace().to_vec(),
            n_rows: n,
            data,
            posteriors,
            density_weights,
            config,
        }
    }

    pub fn to_fit(&self) -> Result<MixtureFit> {
        let data = DataMatrix::from_rows(&self.data)?;
        MixtureFit::from_weighted_components(
            data,
            self.weights.clone(),
            self.density_weights.clone(),
            self.density_bandwidths.clone(),
            self.config.settings.grid,
        )
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct LabelsDocument {
    pub fit: String,
    pub rule: RuleJob,
    /// Component index -> label.
    pub assignment: Vec<String>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct SelectionDocument {
    pub fit: String,
    pub labels: String,
    pub target: String,
    pub threshold: f64,
    pub n_selected: usize,
    pub indices: Vec<usize>,
    pub target_posteriors: Vec<f64>,
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidOptions(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::InvalidOptions(format!("could not parse {}: {e}", path.display()))
    })
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

/// The benchmark dataset as CSV, floats at 17 significant digits.
pub fn write_mixture_csv(
    dir: &Path,
    name: &str,
    sim: &exomix::simgen::LabeledDataset,
    emit_latent: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    let mut header = vec!["Y", "X", "W1", "W2"];
    if emit_latent {
        header.push("component");
        header.push("epsilon");
    }
    w.write_record(&header)?;
    for i in 0..sim.data.nrows() {
        let mut record = vec![format_float(sim.outcome[i])];
        for k in 0..3 {
            record.push(format_float(sim.data.get(i, k)));
        }
        if emit_latent {
            record.push(sim.latent_component[i].to_string());
            record.push(format_float(sim.latent_epsilon[i]));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a vector dataset: named columns from a CSV with a header row.
pub fn load_columns(path: &Path, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let indices: Vec<usize> = names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::SchemaMismatch {
                    column: name.clone(),
                })
        })
        .collect::<Result<_>>()?;
    let mut columns = vec![Vec::new(); names.len()];
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        for (slot, &idx) in indices.iter().enumerate() {
            let raw = record.get(idx).unwrap_or("");
            let value = raw.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: row_idx as u64 + 2,
                column: names[slot].clone(),
                message: format!("{e} in {raw:?}"),
            })?;
            columns[slot].push(value);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::EmptyResult(format!(
            "{} contains no data rows",
            path.display()
        )));
    }
    Ok(columns)
}

/// Column-per-coordinate density curves on a fixed grid, for plotting.
pub fn write_density_curves(
    dir: &Path,
    name: &str,
    fit: &MixtureFit,
    coordinates: &[String],
    points: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(["coordinate", "component", "x", "density"])?;
    for k in 0..fit.n_coords() {
        let col = fit.data().column(k);
        let h = fit.bandwidths().map(|b| b[k]).unwrap_or(0.1);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
        let step = (hi - lo) / (points - 1) as f64;
        for j in 0..fit.n_components() {
            for p in 0..points {
                let x = lo + p as f64 * step;
                let d = fit.density(j, k).eval(x);
                w.write_record([
                    coordinates[k].as_str(),
                    &j.to_string(),
                    &format_float(x),
                    &format_float(d),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Store-week labels as CSV.
pub fn write_store_week_labels(dir: &Path, name: &str, labels: &StoreWeekLabels) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(["category", "store", "week", "label"])?;
    for ((category, store, week), label) in labels {
        w.write_record([category, store, &week.to_string(), label.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Read store-week labels (category,store,week,label; a zone column is
/// tolerated and ignored).
pub fn load_store_week_labels(path: &Path) -> Result<StoreWeekLabels> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaMismatch {
                column: name.to_string(),
            })
    };
    let idx_category = find("category")?;
    let idx_store = find("store")?;
    let idx_week = find("week")?;
    let idx_label = find("label")?;
    let mut out = StoreWeekLabels::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let week = record
            .get(idx_week)
            .unwrap_or("")
            .trim()
            .parse::<i64>()
            .map_err(|e| Error::Parse {
                line: i as u64 + 2,
                column: "week".into(),
                message: e.to_string(),
            })?;
        out.insert(
            (
                record.get(idx_category).unwrap_or("").to_string(),
                record.get(idx_store).unwrap_or("").to_string(),
                week,
            ),
            Label::new(record.get(idx_label).unwrap_or("")),
        );
    }
    Ok(out)
}

/// Wide matrix CSV: store, week, then one column per product.
pub fn write_matrix_csv(
    dir: &Path,
    name: &str,
    assembly: &exomix::panel::MatrixAssembly,
) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    let mut header = vec!["store".to_string(), "week".to_string()];
    header.extend(assembly.coordinates.iter().cloned());
    w.write_record(&header)?;
    for (i, unit) in assembly.units.iter().enumerate() {
        let mut record = vec![unit.store.clone(), unit.week.to_string()];
        for k in 0..assembly.matrix.ncols() {
            record.push(format_float(assembly.matrix.get(i, k)));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ensure_dir(dir: &PathBuf) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}
