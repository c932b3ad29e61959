//! Reproducible experiment runs: a declarative TOML config describing a
//! generator/model/fairness sweep, a runner that executes the cartesian
//! sweep across seeds and writes a canonical metrics CSV plus a manifest,
//! and a comparator for two metrics reports.
//!
//! Results are a pure function of the config: identical configs reproduce
//! the metrics CSV bit-exactly regardless of worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{
    ds_fit, mv_aggregate, soft_ds_fit, DsOptions, SoftDsOptions, WeightedLabels,
};
use crate::data::{
    load_attributes, load_labels, load_soft_labels, save_soft_labels, AttributeTable,
    ConfusionMatrix, DirichletHyper, LabelMatrix, SoftLabels,
};
use crate::error::{Error, Result};
use crate::fairness::{
    groupanno_fit, sample_weights, split_aggregate, GroupAnnoBase, GroupAnnoOptions,
    GroupAnnoOutput, SplitWarning,
};
use crate::metrics::{bias, mae};
use crate::synthgen::{
    flip_labels, gen_biased_data, gen_softds_data, gen_spammer_data, subsample_voters, GenSpec,
};

/// Environment variable overriding the default output directory.
pub const OUT_DIR_ENV: &str = "FAIRAGG_OUT";
/// Config format version accepted by this build.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SoftLabel,
    Spammer,
    FairnessSynthetic,
    FlipSemiSynthetic,
    AggregateFile,
}

impl ExperimentKind {
    fn name(&self) -> &'static str {
        match self {
            ExperimentKind::SoftLabel => "soft_label",
            ExperimentKind::Spammer => "spammer",
            ExperimentKind::FairnessSynthetic => "fairness_synthetic",
            ExperimentKind::FlipSemiSynthetic => "flip_semi_synthetic",
            ExperimentKind::AggregateFile => "aggregate_file",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mv,
    Ds,
    SoftDs,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Mv => "mv",
            ModelKind::Ds => "ds",
            ModelKind::SoftDs => "soft_ds",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessOption {
    None,
    Weighting,
    Splitting,
    Groupanno1,
    Groupanno2,
}

impl FairnessOption {
    pub fn name(&self) -> &'static str {
        match self {
            FairnessOption::None => "none",
            FairnessOption::Weighting => "weighting",
            FairnessOption::Splitting => "splitting",
            FairnessOption::Groupanno1 => "groupanno_1",
            FairnessOption::Groupanno2 => "groupanno_2",
        }
    }

}

/// Generator settings as written in config files (attribute-0 voters first).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_voters_0: usize,
    #[serde(default)]
    pub num_voters_1: usize,
    pub num_tasks: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_diag_beta")]
    pub diag_beta: (f64, f64),
    #[serde(default = "default_z_beta")]
    pub z_beta: (f64, f64),
    #[serde(default)]
    pub num_spammers: usize,
    #[serde(default)]
    pub group_matrix_0: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub group_matrix_1: Option<Vec<Vec<f64>>>,
}

fn default_num_classes() -> usize {
    2
}
fn default_diag_beta() -> (f64, f64) {
    (18.0, 2.0)
}
fn default_z_beta() -> (f64, f64) {
    (10.0, 10.0)
}

impl GenConfig {
    pub fn to_spec(&self, seed: u64) -> Result<GenSpec> {
        let group_matrices = match (&self.group_matrix_0, &self.group_matrix_1) {
            (None, None) => None,
            (Some(g0), Some(g1)) => Some([
                ConfusionMatrix::new(g0.clone())?,
                ConfusionMatrix::new(g1.clone())?,
            ]),
            _ => {
                return Err(Error::Config(
                    "group_matrix_0 and group_matrix_1 must be given together".into(),
                ))
            }
        };
        Ok(GenSpec {
            num_voters_per_attr: (self.num_voters_0, self.num_voters_1),
            num_tasks: self.num_tasks,
            num_classes: self.num_classes,
            diag_beta: self.diag_beta,
            z_beta: self.z_beta,
            group_matrices,
            num_spammers: self.num_spammers,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub alpha: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
}

impl HyperConfig {
    fn to_hyper(&self) -> Result<DirichletHyper> {
        DirichletHyper::new(self.alpha.clone(), self.rho.clone())
    }
}

/// File inputs for `flip_semi_synthetic` and `aggregate_file` experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub labels: PathBuf,
    #[serde(default)]
    pub attributes: Option<PathBuf>,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Optional reference soft labels for metrics.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default = "default_ideal_dist")]
    pub ideal_dist: (f64, f64),
}

fn default_ideal_dist() -> (f64, f64) {
    (0.5, 0.5)
}

/// Flip-experiment settings. Classes are one-based here, matching the label
/// CSV convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipConfig {
    pub class_for_attr: (usize, usize),
    #[serde(default = "default_subsample")]
    pub subsample: (f64, f64),
}

fn default_subsample() -> (f64, f64) {
    (1.0, 0.5)
}

/// Optional sweep axes; which axes apply depends on the experiment kind.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub num_tasks: Option<Vec<usize>>,
    #[serde(default)]
    pub num_spammers: Option<Vec<usize>>,
    #[serde(default)]
    pub flip_rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: ExperimentKind,
    pub models: Vec<ModelKind>,
    #[serde(default = "default_fairness")]
    pub fairness: Vec<FairnessOption>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub gen: Option<GenConfig>,
    #[serde(default)]
    pub hyper: Option<HyperConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub inputs: Option<InputConfig>,
    #[serde(default)]
    pub flip: Option<FlipConfig>,
}

fn default_fairness() -> Vec<FairnessOption> {
    vec![FairnessOption::None]
}

impl ExperimentConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(raw).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.models.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("models and seeds must be non-empty".into()));
        }
        for option in &self.fairness {
            if matches!(option, FairnessOption::Groupanno1 | FairnessOption::Groupanno2)
                && self.models.iter().all(|m| *m == ModelKind::Mv)
            {
                return Err(Error::Config(
                    "groupanno options require the ds or soft_ds model".into(),
                ));
            }
        }
        match self.experiment {
            ExperimentKind::SoftLabel | ExperimentKind::Spammer => {
                if self.gen.is_none() {
                    return Err(Error::Config("[gen] section is required".into()));
                }
                if self.sweep.flip_rates.is_some() {
                    return Err(Error::Config("flip_rates only apply to flip experiments".into()));
                }
            }
            ExperimentKind::FairnessSynthetic => {
                let gen = self
                    .gen
                    .as_ref()
                    .ok_or_else(|| Error::Config("[gen] section is required".into()))?;
                if gen.group_matrix_0.is_none() {
                    return Err(Error::Config(
                        "fairness_synthetic requires group matrices in [gen]".into(),
                    ));
                }
            }
            ExperimentKind::FlipSemiSynthetic => {
                let inputs = self
                    .inputs
                    .as_ref()
                    .ok_or_else(|| Error::Config("flip_semi_synthetic requires [inputs]".into()))?;
                if inputs.attributes.is_none() {
                    return Err(Error::Config(
                        "flip_semi_synthetic requires input label and attribute paths".into(),
                    ));
                }
                if self.flip.is_none() {
                    return Err(Error::Config("flip_semi_synthetic requires [flip]".into()));
                }
            }
            ExperimentKind::AggregateFile => {
                if self.inputs.is_none() {
                    return Err(Error::Config("aggregate_file requires [inputs]".into()));
                }
            }
        }
        Ok(())
    }

    /// Hyperparameters: explicit config, else a diagonally dominant prior
    /// for the soft-label/spammer experiments and a flat prior otherwise.
    pub fn hyperparameters(&self, num_classes: usize) -> Result<DirichletHyper> {
        match &self.hyper {
            Some(h) => h.to_hyper(),
            None => match self.experiment {
                ExperimentKind::SoftLabel | ExperimentKind::Spammer => {
                    DirichletHyper::diagonal(num_classes, 4.0, 1.0)
                }
                _ => Ok(DirichletHyper::flat(num_classes)),
            },
        }
    }

    /// Canonical SHA-256 of the config's JSON serialization.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Model/fairness dispatch shared by the runner and the CLI.
#[derive(Debug, Clone)]
pub struct AggregateOptions {
    pub model: ModelKind,
    pub fairness: FairnessOption,
    pub hyper: DirichletHyper,
    pub ds: DsOptions,
    pub soft_ds: SoftDsOptions,
    pub groupanno: GroupAnnoOptions,
}

impl AggregateOptions {
    pub fn new(model: ModelKind, fairness: FairnessOption, hyper: DirichletHyper) -> Self {
        AggregateOptions {
            model,
            fairness,
            hyper,
            ds: DsOptions::default(),
            soft_ds: SoftDsOptions::default(),
            groupanno: GroupAnnoOptions::default(),
        }
    }
}

/// Runs one model with one fairness option over a label matrix.
pub fn aggregate_with_options(
    labels: &LabelMatrix,
    attrs: Option<&AttributeTable>,
    opts: &AggregateOptions,
) -> Result<(SoftLabels, Vec<SplitWarning>)> {
    let attrs_required = || {
        attrs.ok_or_else(|| {
            Error::Config(format!(
                "fairness option '{}' requires voter attributes",
                opts.fairness.name()
            ))
        })
    };
    let fit_weighted = |data: &WeightedLabels| -> Result<SoftLabels> {
        match opts.model {
            ModelKind::Mv => mv_aggregate(data),
            ModelKind::Ds => Ok(ds_fit(data, None, &opts.ds)?.state.posteriors),
            ModelKind::SoftDs => {
                Ok(soft_ds_fit(data, &opts.hyper, &opts.soft_ds)?.state.posteriors)
            }
        }
    };
    match opts.fairness {
        FairnessOption::None => {
            let estimate = fit_weighted(&WeightedLabels::unit(labels.clone()))?;
            Ok((estimate, Vec::new()))
        }
        FairnessOption::Weighting => {
            let weighted = sample_weights(labels, attrs_required()?)?;
            Ok((fit_weighted(&weighted)?, Vec::new()))
        }
        FairnessOption::Splitting => split_aggregate(labels, attrs_required()?, |split| {
            fit_weighted(&WeightedLabels::unit(split.clone()))
        }),
        FairnessOption::Groupanno1 | FairnessOption::Groupanno2 => {
            let base = match opts.model {
                ModelKind::Ds => GroupAnnoBase::Ds,
                ModelKind::SoftDs => GroupAnnoBase::SoftDs,
                ModelKind::Mv => {
                    return Err(Error::Config(
                        "groupanno options require the ds or soft_ds model".into(),
                    ))
                }
            };
            let output = if opts.fairness == FairnessOption::Groupanno1 {
                GroupAnnoOutput::Direct
            } else {
                GroupAnnoOutput::GroupReweighted
            };
            let ga_opts = GroupAnnoOptions {
                output,
                ..opts.groupanno.clone()
            };
            let fit = groupanno_fit(labels, attrs_required()?, base, &opts.hyper, &ga_opts)?;
            Ok((fit.soft_labels, Vec::new()))
        }
    }
}

/// One row of the metrics report. Bias is reported on class 1 (the first
/// class of the label CSV convention).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub model: String,
    pub fairness: String,
    pub seed: u64,
    pub num_voters_0: usize,
    pub num_voters_1: usize,
    pub num_tasks: usize,
    pub num_spammers: Option<usize>,
    pub flip_rate: Option<f64>,
    pub subsample_0: Option<f64>,
    pub subsample_1: Option<f64>,
    pub mae: Option<f64>,
    pub bias: Option<f64>,
    pub status: String,
    pub error: String,
}

pub const METRICS_HEADER: [&str; 15] = [
    "experiment",
    "model",
    "fairness",
    "seed",
    "num_voters_0",
    "num_voters_1",
    "num_tasks",
    "num_spammers",
    "flip_rate",
    "subsample_0",
    "subsample_1",
    "mae",
    "bias",
    "status",
    "error",
];

#[derive(Debug, Clone)]
#[derive(Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    pub emit_soft_labels: bool,
    /// Overrides the config's output directory (highest priority).
    pub out_dir: Option<PathBuf>,
}


#[derive(Debug)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub warnings: Vec<(String, SplitWarning)>,
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
}

#[derive(Debug, Serialize)]
struct Manifest {
    library_version: String,
    config_version: u32,
    config_hash: String,
    experiment: String,
    seeds: Vec<u64>,
    files: Vec<String>,
    rows: usize,
}

/// A single point of the sweep.
#[derive(Debug, Clone)]
struct RunPoint {
    model: ModelKind,
    fairness: FairnessOption,
    seed: u64,
    num_tasks: Option<usize>,
    num_spammers: Option<usize>,
    flip_rate: Option<f64>,
}

/// Data for file-based experiments, loaded once.
struct LoadedInputs {
    labels: LabelMatrix,
    attrs: Option<AttributeTable>,
    task_ids: Vec<String>,
    reference: Option<SoftLabels>,
}

fn load_inputs(config: &InputConfig) -> Result<LoadedInputs> {
    let loaded = load_labels(&config.labels, config.num_classes)?;
    let attrs = config
        .attributes
        .as_ref()
        .map(|path| load_attributes(path, &loaded.voter_ids, config.ideal_dist))
        .transpose()?;
    let reference = config
        .reference
        .as_ref()
        .map(|path| {
            let (ids, soft) = load_soft_labels(path)?;
            if ids != loaded.task_ids {
                return Err(Error::Validation(
                    "reference task ids do not match the labels file".into(),
                ));
            }
            Ok(soft)
        })
        .transpose()?;
    Ok(LoadedInputs {
        labels: loaded.matrix,
        attrs,
        task_ids: loaded.task_ids,
        reference,
    })
}

/// Executes the config's cartesian sweep and writes `metrics.csv` plus
/// `manifest.json` (and per-run soft labels when requested) into the output
/// directory. Failures of individual runs become failure rows; the sweep
/// continues.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    config.validate()?;
    let out_dir = resolve_out_dir(config, opts);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let inputs = match config.experiment {
        ExperimentKind::FlipSemiSynthetic | ExperimentKind::AggregateFile => {
            Some(load_inputs(config.inputs.as_ref().expect("validated"))?)
        }
        _ => None,
    };

    let points = expand_points(config);
    let execute = || -> Vec<(MetricsRow, Vec<SplitWarning>, Option<SoftLabels>)> {
        points
            .par_iter()
            .map(|point| run_point(config, inputs.as_ref(), point))
            .collect()
    };
    let mut results = match opts.workers {
        Some(workers) => rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(execute),
        None => execute(),
    };

    // Canonical report order, independent of completion order.
    results.sort_by(|(a, _, _), (b, _, _)| {
        (&a.model, &a.fairness)
            .cmp(&(&b.model, &b.fairness))
            .then(a.num_tasks.cmp(&b.num_tasks))
            .then(a.num_spammers.cmp(&b.num_spammers))
            .then(
                a.flip_rate
                    .partial_cmp(&b.flip_rate)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(a.seed.cmp(&b.seed))
    });

    let mut files = vec!["metrics.csv".to_string(), "manifest.json".to_string()];
    let mut rows = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (row, row_warnings, soft) in results {
        if opts.emit_soft_labels {
            if let Some(soft) = soft {
                let name = format!(
                    "soft_labels/{}_{}_{}_{}{}{}.csv",
                    row.experiment,
                    row.model,
                    row.fairness,
                    row.seed,
                    row.num_tasks_suffix(),
                    row.axis_suffix()
                );
                let path = out_dir.join(&name);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                let ids = inputs.as_ref().map(|i| i.task_ids.clone());
                save_soft_labels(&soft, ids.as_deref(), &path)?;
                files.push(name);
            }
        }
        let key = format!("{}/{}/seed{}", row.model, row.fairness, row.seed);
        warnings.extend(row_warnings.into_iter().map(|w| (key.clone(), w)));
        rows.push(row);
    }

    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(&rows, &metrics_path)?;

    if !warnings.is_empty() {
        let path = out_dir.join("warnings.json");
        let payload: Vec<serde_json::Value> = warnings
            .iter()
            .map(|(run, w)| {
                serde_json::json!({"run": run, "task": w.task, "missing_attr": w.missing_attr})
            })
            .collect();
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&payload).expect("serializable"),
        )
        .map_err(|e| Error::io(&path, e))?;
        files.push("warnings.json".to_string());
    }

    let manifest = Manifest {
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config_version: config.version,
        config_hash: config.config_hash(),
        experiment: config.experiment.name().to_string(),
        seeds: config.seeds.clone(),
        files,
        rows: rows.len(),
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("serializable"),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;

    Ok(RunReport {
        rows,
        warnings,
        out_dir,
        metrics_path,
        manifest_path,
    })
}

fn resolve_out_dir(config: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    if let Some(dir) = &opts.out_dir {
        return dir.clone();
    }
    if let Some(dir) = &config.output_dir {
        return dir.clone();
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("runs")
}

fn expand_points(config: &ExperimentConfig) -> Vec<RunPoint> {
    let task_axis: Vec<Option<usize>> = match (&config.experiment, &config.sweep.num_tasks) {
        (ExperimentKind::SoftLabel | ExperimentKind::FairnessSynthetic, Some(grid)) => {
            grid.iter().map(|&j| Some(j)).collect()
        }
        _ => vec![None],
    };
    let spammer_axis: Vec<Option<usize>> = match (&config.experiment, &config.sweep.num_spammers) {
        (ExperimentKind::Spammer, Some(grid)) => grid.iter().map(|&s| Some(s)).collect(),
        (ExperimentKind::Spammer, None) => vec![None],
        _ => vec![None],
    };
    let flip_axis: Vec<Option<f64>> = match (&config.experiment, &config.sweep.flip_rates) {
        (ExperimentKind::FlipSemiSynthetic, Some(grid)) => {
            grid.iter().map(|&r| Some(r)).collect()
        }
        (ExperimentKind::FlipSemiSynthetic, None) => vec![Some(0.0)],
        _ => vec![None],
    };

    let mut points = Vec::new();
    for model in &config.models {
        for fairness in &config.fairness {
            if matches!(fairness, FairnessOption::Groupanno1 | FairnessOption::Groupanno2)
                && *model == ModelKind::Mv
            {
                continue;
            }
            for &num_tasks in &task_axis {
                for &num_spammers in &spammer_axis {
                    for &flip_rate in &flip_axis {
                        for &seed in &config.seeds {
                            points.push(RunPoint {
                                model: *model,
                                fairness: *fairness,
                                seed,
                                num_tasks,
                                num_spammers,
                                flip_rate,
                            });
                        }
                    }
                }
            }
        }
    }
    points
}

impl MetricsRow {
    fn num_tasks_suffix(&self) -> String {
        format!("_j{}", self.num_tasks)
    }

    fn axis_suffix(&self) -> String {
        let mut suffix = String::new();
        if let Some(s) = self.num_spammers {
            suffix.push_str(&format!("_s{s}"));
        }
        if let Some(r) = self.flip_rate {
            suffix.push_str(&format!("_r{r}"));
        }
        suffix
    }
}

fn run_point(
    config: &ExperimentConfig,
    inputs: Option<&LoadedInputs>,
    point: &RunPoint,
) -> (MetricsRow, Vec<SplitWarning>, Option<SoftLabels>) {
    let mut row = MetricsRow {
        experiment: config.experiment.name().to_string(),
        model: point.model.name().to_string(),
        fairness: point.fairness.name().to_string(),
        seed: point.seed,
        num_voters_0: 0,
        num_voters_1: 0,
        num_tasks: 0,
        num_spammers: point.num_spammers,
        flip_rate: point.flip_rate,
        subsample_0: None,
        subsample_1: None,
        mae: None,
        bias: None,
        status: "ok".to_string(),
        error: String::new(),
    };
    match execute_point(config, inputs, point, &mut row) {
        Ok((soft, warnings)) => (row, warnings, Some(soft)),
        Err(e) => {
            row.status = "failed".to_string();
            row.error = e.to_string();
            (row, Vec::new(), None)
        }
    }
}

fn execute_point(
    config: &ExperimentConfig,
    inputs: Option<&LoadedInputs>,
    point: &RunPoint,
    row: &mut MetricsRow,
) -> Result<(SoftLabels, Vec<SplitWarning>)> {
    let (labels, attrs, reference) = match config.experiment {
        ExperimentKind::SoftLabel | ExperimentKind::Spammer | ExperimentKind::FairnessSynthetic => {
            let gen = config.gen.as_ref().expect("validated");
            let mut spec = gen.to_spec(point.seed)?;
            if let Some(num_tasks) = point.num_tasks {
                spec.num_tasks = num_tasks;
            }
            if let Some(num_spammers) = point.num_spammers {
                spec.num_spammers = num_spammers;
            }
            let bundle = match config.experiment {
                ExperimentKind::SoftLabel => gen_softds_data(&spec)?,
                ExperimentKind::Spammer => gen_spammer_data(&spec)?,
                ExperimentKind::FairnessSynthetic => gen_biased_data(&spec)?,
                _ => unreachable!(),
            };
            (bundle.labels, Some(bundle.attrs), Some(bundle.true_soft))
        }
        ExperimentKind::FlipSemiSynthetic => {
            let data = inputs.expect("loaded");
            let attrs = data.attrs.as_ref().expect("validated");
            let flip = config.flip.as_ref().expect("validated");
            let class_for_attr = [
                one_based_class(flip.class_for_attr.0, data.labels.num_classes())?,
                one_based_class(flip.class_for_attr.1, data.labels.num_classes())?,
            ];
            let rate = point.flip_rate.expect("flip axis");
            let flipped = flip_labels(&data.labels, attrs, class_for_attr, rate, point.seed)?;
            // Reference: majority vote over the still-balanced flipped data.
            let reference = mv_aggregate(&WeightedLabels::unit(flipped.clone()))?;
            let (sub_labels, sub_attrs) = subsample_voters(
                &flipped,
                attrs,
                [flip.subsample.0, flip.subsample.1],
                point.seed,
            )?;
            row.subsample_0 = Some(flip.subsample.0);
            row.subsample_1 = Some(flip.subsample.1);
            (sub_labels, Some(sub_attrs), Some(reference))
        }
        ExperimentKind::AggregateFile => {
            let data = inputs.expect("loaded");
            (
                data.labels.clone(),
                data.attrs.clone(),
                data.reference.clone(),
            )
        }
    };

    row.num_tasks = labels.num_tasks();
    if let Some(attrs) = &attrs {
        row.num_voters_0 = attrs.voters_with(0).len();
        row.num_voters_1 = attrs.voters_with(1).len();
    } else {
        row.num_voters_0 = labels.num_voters();
    }

    let hyper = config.hyperparameters(labels.num_classes())?;
    let opts = AggregateOptions::new(point.model, point.fairness, hyper);
    let (estimate, warnings) = aggregate_with_options(&labels, attrs.as_ref(), &opts)?;
    if let Some(reference) = &reference {
        row.mae = Some(mae(&estimate, reference)?);
        row.bias = Some(bias(&estimate, reference, 0)?);
    }
    Ok((estimate, warnings))
}

fn one_based_class(class: usize, num_classes: usize) -> Result<usize> {
    if class == 0 || class > num_classes {
        return Err(Error::Config(format!(
            "class {class} outside 1..={num_classes}"
        )));
    }
    Ok(class - 1)
}

fn format_opt<T: std::fmt::Display>(value: &Option<T>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))?;
    writer
        .write_record(METRICS_HEADER)
        .map_err(|e| Error::Validation(e.to_string()))?;
    for row in rows {
        writer
            .write_record([
                row.experiment.clone(),
                row.model.clone(),
                row.fairness.clone(),
                row.seed.to_string(),
                row.num_voters_0.to_string(),
                row.num_voters_1.to_string(),
                row.num_tasks.to_string(),
                format_opt(&row.num_spammers),
                format_opt(&row.flip_rate),
                format_opt(&row.subsample_0),
                format_opt(&row.subsample_1),
                format_opt(&row.mae),
                format_opt(&row.bias),
                row.status.clone(),
                row.error.clone(),
            ])
            .map_err(|e| Error::Validation(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A parsed metrics report keyed by its identifying columns.
#[derive(Debug)]
pub struct MetricsReport {
    /// key -> (mae, bias, status)
    pub entries: BTreeMap<String, (Option<f64>, Option<f64>, String)>,
}

pub fn load_metrics_csv(path: &Path) -> Result<MetricsReport> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let mae_col = find("mae").ok_or_else(|| Error::parse(path, 1, "missing mae column"))?;
    let bias_col = find("bias").ok_or_else(|| Error::parse(path, 1, "missing bias column"))?;
    let status_col = find("status").ok_or_else(|| Error::parse(path, 1, "missing status column"))?;
    let error_col = find("error");

    let mut entries = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(path, line, e.to_string())
        })?;
        let key: Vec<&str> = record
            .iter()
            .enumerate()
            .filter(|(idx, _)| {
                *idx != mae_col && *idx != bias_col && *idx != status_col && Some(*idx) != error_col
            })
            .map(|(_, cell)| cell)
            .collect();
        let parse_cell = |idx: usize| -> Option<f64> {
            let cell = record.get(idx).unwrap_or("");
            if cell.is_empty() {
                None
            } else {
                cell.parse().ok()
            }
        };
        entries.insert(
            key.join("|"),
            (
                parse_cell(mae_col),
                parse_cell(bias_col),
                record.get(status_col).unwrap_or("").to_string(),
            ),
        );
    }
    Ok(MetricsReport { entries })
}

#[derive(Debug, Clone)]
pub struct RowDelta {
    pub key: String,
    pub mae_delta: Option<f64>,
    pub bias_delta: Option<f64>,
    pub status_changed: bool,
}

#[derive(Debug)]
pub struct CompareReport {
    pub deltas: Vec<RowDelta>,
    pub max_mae_delta: f64,
    pub max_bias_delta: f64,
    /// Rows whose deltas exceed the threshold (or whose status changed).
    pub exceeding: Vec<String>,
}

/// Compares two metrics reports row by row. Reports with different sweep
/// grids (mismatched key sets) are a structural error.
pub fn compare(path_a: &Path, path_b: &Path, threshold: f64) -> Result<CompareReport> {
    let a = load_metrics_csv(path_a)?;
    let b = load_metrics_csv(path_b)?;
    let keys_a: Vec<&String> = a.entries.keys().collect();
    let keys_b: Vec<&String> = b.entries.keys().collect();
    if keys_a != keys_b {
        let only_a: Vec<&&String> = keys_a.iter().filter(|k| !b.entries.contains_key(**k)).collect();
        let only_b: Vec<&&String> = keys_b.iter().filter(|k| !a.entries.contains_key(**k)).collect();
        return Err(Error::Validation(format!(
            "reports cover different sweeps: {} rows only in {}, {} rows only in {}",
            only_a.len(),
            path_a.display(),
            only_b.len(),
            path_b.display()
        )));
    }

    let mut deltas = Vec::new();
    let mut max_mae_delta = 0.0_f64;
    let mut max_bias_delta = 0.0_f64;
    let mut exceeding = Vec::new();
    for (key, (mae_a, bias_a, status_a)) in &a.entries {
        let (mae_b, bias_b, status_b) = &b.entries[key];
        let mae_delta = match (mae_a, mae_b) {
            (Some(x), Some(y)) => Some((x - y).abs()),
            (None, None) => None,
            _ => Some(f64::INFINITY),
        };
        let bias_delta = match (bias_a, bias_b) {
            (Some(x), Some(y)) => Some((x - y).abs()),
            (None, None) => None,
            _ => Some(f64::INFINITY),
        };
        let status_changed = status_a != status_b;
        if let Some(d) = mae_delta {
            max_mae_delta = max_mae_delta.max(d);
        }
        if let Some(d) = bias_delta {
            max_bias_delta = max_bias_delta.max(d);
        }
        if status_changed
            || mae_delta.is_some_and(|d| d > threshold)
            || bias_delta.is_some_and(|d| d > threshold)
        {
            exceeding.push(key.clone());
        }
        deltas.push(RowDelta {
            key: key.clone(),
            mae_delta,
            bias_delta,
            status_changed,
        });
    }
    Ok(CompareReport {
        deltas,
        max_mae_delta,
        max_bias_delta,
        exceeding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_config(out: &Path) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
version = 1
experiment = "soft_label"
models = ["mv", "ds"]
seeds = [1, 2]
output_dir = "{}"

[gen]
num_voters_0 = 8
num_tasks = 6
"#,
            out.display()
        ))
        .unwrap()
    }

    #[test]
    fn config_rejects_bad_combinations() {
        let err = ExperimentConfig::from_toml_str(
            r#"
version = 1
experiment = "soft_label"
models = ["mv"]
fairness = ["groupanno_1"]
seeds = [1]
[gen]
num_voters_0 = 4
num_tasks = 3
"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("groupanno"), "{err}");

        let err = ExperimentConfig::from_toml_str(
            r#"
version = 1
experiment = "flip_semi_synthetic"
models = ["mv"]
seeds = [1]
"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("[inputs]"), "{err}");

        let err = ExperimentConfig::from_toml_str(
            r#"
version = 2
experiment = "soft_label"
models = ["mv"]
seeds = [1]
[gen]
num_voters_0 = 4
num_tasks = 3
"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn identical_configs_reproduce_metrics_bit_exactly() {
        let dir = tempdir().unwrap();
        let config = small_config(&dir.path().join("out"));
        let report1 = run(&config, &RunOptions::default()).unwrap();
        let first = std::fs::read(&report1.metrics_path).unwrap();
        let report2 = run(&config, &RunOptions::default()).unwrap();
        let second = std::fs::read(&report2.metrics_path).unwrap();
        assert_eq!(first, second);
        assert!(report1.manifest_path.exists());

        // worker count must not change the bytes either
        let report3 = run(
            &config,
            &RunOptions {
                workers: Some(1),
                ..RunOptions::default()
            },
        )
        .unwrap();
        let third = std::fs::read(&report3.metrics_path).unwrap();
        assert_eq!(first, third);
    }

    #[test]
    fn manifest_lists_every_output_file() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("out");
        let config = small_config(&out);
        run(
            &config,
            &RunOptions {
                emit_soft_labels: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        let files: Vec<String> = manifest["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        // walk the output dir; every file except the manifest itself must be
        // listed
        let mut found = Vec::new();
        for entry in walk(&out) {
            let rel = entry.strip_prefix(&out).unwrap().to_string_lossy().replace('\\', "/");
            found.push(rel);
        }
        for file in &found {
            assert!(
                files.contains(file) || file == "manifest.json",
                "orphan output {file}"
            );
        }
        assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
        out
    }

    #[test]
    fn compare_identical_reports_is_clean() {
        let dir = tempdir().unwrap();
        let config = small_config(&dir.path().join("out"));
        let report = run(&config, &RunOptions::default()).unwrap();
        let cmp = compare(&report.metrics_path, &report.metrics_path, 0.01).unwrap();
        assert!(cmp.exceeding.is_empty());
        assert_eq!(cmp.max_mae_delta, 0.0);
    }

    #[test]
    fn compare_flags_rows_over_threshold() {
        let dir = tempdir().unwrap();
        let config = small_config(&dir.path().join("out"));
        let report = run(&config, &RunOptions::default()).unwrap();

        let mut rows = report.rows.clone();
        rows[0].mae = rows[0].mae.map(|m| m + 0.05);
        let other = dir.path().join("other.csv");
        write_metrics_csv(&rows, &other).unwrap();

        let cmp = compare(&report.metrics_path, &other, 0.01).unwrap();
        assert_eq!(cmp.exceeding.len(), 1, "{:?}", cmp.exceeding);

        let relaxed = compare(&report.metrics_path, &other, 0.1).unwrap();
        assert!(relaxed.exceeding.is_empty());
    }

    #[test]
    fn compare_rejects_mismatched_grids() {
        let dir = tempdir().unwrap();
        let config = small_config(&dir.path().join("out"));
        let report = run(&config, &RunOptions::default()).unwrap();
        let mut rows = report.rows.clone();
        rows.pop();
        let other = dir.path().join("other.csv");
        write_metrics_csv(&rows, &other).unwrap();
        assert!(compare(&report.metrics_path, &other, 0.01).is_err());
    }
}
