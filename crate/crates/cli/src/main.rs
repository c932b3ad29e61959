//! Command-line interface for fairness-aware opinion aggregation:
//! aggregate label files, generate synthetic datasets, run experiment
//! sweeps, evaluate metrics, preprocess Moral Machine exports, and compare
//! metrics reports.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fairagg::data::{
    load_attributes, load_labels, load_soft_labels, save_attributes, save_ground_truth,
    save_labels, save_labels_metadata, save_soft_labels, AttributeTable, ConfusionMatrix,
    DirichletHyper, LoadedLabels,
};
use fairagg::experiment::{
    aggregate_with_options, compare, run, AggregateOptions, ExperimentConfig, FairnessOption,
    ModelKind, RunOptions,
};
use fairagg::metrics::{bias, mae};
use fairagg::moral_machine::{parse_mm_csv, preprocess_mm, PreprocessConfig};
use fairagg::synthgen::{gen_biased_data, gen_softds_data, gen_spammer_data, GenSpec};

#[derive(Parser)]
#[command(name = "fairagg", version, about = "Fairness-aware opinion aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate a labels CSV into soft labels with one model and fairness option.
    Aggregate(AggregateArgs),
    /// Generate a synthetic dataset and write labels, attributes, and ground truth.
    Synth(SynthArgs),
    /// Run an experiment sweep described by a TOML config.
    Experiment(ExperimentArgs),
    /// Evaluate MAE and bias between two soft-label CSVs.
    Metrics(MetricsArgs),
    /// Preprocess a Moral Machine response CSV into labels and attributes.
    PreprocessMm(PreprocessArgs),
    /// Compare two metrics reports; nonzero exit when deltas exceed the threshold.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mv,
    Ds,
    SoftDs,
}

impl From<ModelArg> for ModelKind {
    fn from(value: ModelArg) -> Self {
        match value {
            ModelArg::Mv => ModelKind::Mv,
            ModelArg::Ds => ModelKind::Ds,
            ModelArg::SoftDs => ModelKind::SoftDs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FairnessArg {
    None,
    Weighting,
    Splitting,
    Groupanno1,
    Groupanno2,
}

impl From<FairnessArg> for FairnessOption {
    fn from(value: FairnessArg) -> Self {
        match value {
            FairnessArg::None => FairnessOption::None,
            FairnessArg::Weighting => FairnessOption::Weighting,
            FairnessArg::Splitting => FairnessOption::Splitting,
            FairnessArg::Groupanno1 => FairnessOption::Groupanno1,
            FairnessArg::Groupanno2 => FairnessOption::Groupanno2,
        }
    }
}

#[derive(Args)]
struct AggregateArgs {
    /// Labels CSV (voter_id,task_id,label).
    #[arg(long)]
    labels: PathBuf,
    /// Attributes CSV (voter_id,attribute); required for fairness options.
    #[arg(long)]
    attrs: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value = "mv")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "none")]
    fairness: FairnessArg,
    /// Ideal attribute distribution "p0,p1".
    #[arg(long, default_value = "0.5,0.5")]
    ideal_dist: String,
    /// Dirichlet prior on confusion rows, e.g. "4,1;1,4". Defaults to flat.
    #[arg(long)]
    hyper_alpha: Option<String>,
    /// Dirichlet prior on soft labels, e.g. "1,1". Defaults to flat.
    #[arg(long)]
    hyper_rho: Option<String>,
    /// Where to write the soft-label CSV.
    #[arg(long)]
    out_labels: PathBuf,
    /// Optional reference soft labels; prints MAE/bias when given.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    SoftLabel,
    Spammer,
    Biased,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "soft-label")]
    kind: SynthKind,
    /// Voters with attribute 0.
    #[arg(long, default_value_t = 1000)]
    voters0: usize,
    /// Voters with attribute 1.
    #[arg(long, default_value_t = 0)]
    voters1: usize,
    #[arg(long, default_value_t = 100)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    spammers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Beta shape for confusion diagonals, "a,b".
    #[arg(long, default_value = "18,2")]
    diag_beta: String,
    /// Beta shape for true soft labels, "a,b".
    #[arg(long, default_value = "10,10")]
    z_beta: String,
    /// Group matrix for attribute 0, rows separated by ';', e.g. "1,0;1,0".
    #[arg(long)]
    group0: Option<String>,
    /// Group matrix for attribute 1.
    #[arg(long)]
    group1: Option<String>,
    /// Output directory for labels.csv, attributes.csv, truth.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel workers for the sweep.
    #[arg(long)]
    workers: Option<usize>,
    /// Also write per-run soft-label CSVs.
    #[arg(long)]
    emit_soft_labels: bool,
    /// Output directory, overriding the config and FAIRAGG_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// One-based class for the bias metric.
    #[arg(long, default_value_t = 1)]
    class: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Moral Machine response CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    min_labels_female: usize,
    #[arg(long, default_value_t = 10)]
    min_labels_task: usize,
    /// Survey answers treated as untouched defaults (comma-separated).
    #[arg(long, default_value = "default")]
    default_gender_values: String,
}

#[derive(Args)]
struct CompareArgs {
    report_a: PathBuf,
    report_b: PathBuf,
    /// Largest tolerated |delta| in MAE or bias per row.
    #[arg(long, default_value_t = 1e-9)]
    threshold: f64,
}

fn parse_pair(raw: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 2 {
        bail!("expected two comma-separated numbers, got '{raw}'");
    }
    Ok((
        parts[0].trim().parse().context("first number")?,
        parts[1].trim().parse().context("second number")?,
    ))
}

fn parse_matrix(raw: &str) -> Result<Vec<Vec<f64>>> {
    raw.split(';')
        .map(|row| {
            row.split(',')
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .with_context(|| format!("bad matrix cell '{cell}'"))
                })
                .collect()
        })
        .collect()
}

fn parse_hyper(alpha: &Option<String>, rho: &Option<String>, classes: usize) -> Result<DirichletHyper> {
    let flat = DirichletHyper::flat(classes);
    let alpha = match alpha {
        Some(raw) => parse_matrix(raw)?,
        None => (0..classes).map(|k| flat.alpha_row(k).to_vec()).collect(),
    };
    let rho = match rho {
        Some(raw) => raw
            .split(',')
            .map(|cell| cell.trim().parse::<f64>().context("bad rho entry"))
            .collect::<Result<Vec<f64>>>()?,
        None => flat.rho().to_vec(),
    };
    Ok(DirichletHyper::new(alpha, rho)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Aggregate(args) => cmd_aggregate(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::PreprocessMm(args) => cmd_preprocess(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn cmd_aggregate(args: AggregateArgs) -> Result<()> {
    let loaded = load_labels(&args.labels, args.classes)?;
    let ideal = parse_pair(&args.ideal_dist)?;
    let attrs: Option<AttributeTable> = args
        .attrs
        .as_ref()
        .map(|path| load_attributes(path, &loaded.voter_ids, ideal))
        .transpose()?;
    let hyper = parse_hyper(&args.hyper_alpha, &args.hyper_rho, args.classes)?;
    let opts = AggregateOptions::new(args.model.into(), args.fairness.into(), hyper);
    let (soft, warnings) = aggregate_with_options(&loaded.matrix, attrs.as_ref(), &opts)?;
    save_soft_labels(&soft, Some(&loaded.task_ids), &args.out_labels)?;
    println!(
        "aggregated {} labels over {} tasks -> {}",
        loaded.matrix.num_labels(),
        loaded.matrix.num_tasks(),
        args.out_labels.display()
    );
    for warning in &warnings {
        eprintln!(
            "warning: task '{}' has labels from attribute {} only",
            loaded.task_ids[warning.task],
            1 - warning.missing_attr
        );
    }
    if let Some(reference) = &args.reference {
        let (_, reference) = load_soft_labels(reference)?;
        println!("mae={}", mae(&soft, &reference)?);
        println!("bias_class_1={}", bias(&soft, &reference, 0)?);
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let group_matrices = match (&args.group0, &args.group1) {
        (None, None) => None,
        (Some(g0), Some(g1)) => Some([
            ConfusionMatrix::new(parse_matrix(g0)?)?,
            ConfusionMatrix::new(parse_matrix(g1)?)?,
        ]),
        _ => bail!("--group0 and --group1 must be given together"),
    };
    let spec = GenSpec {
        num_voters_per_attr: (args.voters0, args.voters1),
        num_tasks: args.tasks,
        num_classes: 2,
        diag_beta: parse_pair(&args.diag_beta)?,
        z_beta: parse_pair(&args.z_beta)?,
        group_matrices,
        num_spammers: args.spammers,
        seed: args.seed,
    };
    let bundle = match args.kind {
        SynthKind::SoftLabel => gen_softds_data(&spec)?,
        SynthKind::Spammer => gen_spammer_data(&spec)?,
        SynthKind::Biased => gen_biased_data(&spec)?,
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let labels = LoadedLabels::with_generated_ids(bundle.labels);
    save_labels(&labels, &args.out.join("labels.csv"))?;
    save_labels_metadata(&labels, &args.out.join("labels.meta.json"))?;
    save_attributes(&bundle.attrs, &labels.voter_ids, &args.out.join("attributes.csv"))?;
    save_ground_truth(&bundle.true_soft, Some(&labels.task_ids), &args.out.join("truth.csv"))?;
    println!(
        "wrote {} labels from {} voters on {} tasks to {}",
        labels.matrix.num_labels(),
        labels.matrix.num_voters(),
        labels.matrix.num_tasks(),
        args.out.display()
    );
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    let report = run(
        &config,
        &RunOptions {
            workers: args.workers,
            emit_soft_labels: args.emit_soft_labels,
            out_dir: args.out,
        },
    )?;
    let failed = report.rows.iter().filter(|r| r.status != "ok").count();
    println!(
        "wrote {} rows to {} ({} failed, {} split warnings)",
        report.rows.len(),
        report.metrics_path.display(),
        failed,
        report.warnings.len()
    );
    if failed > 0 {
        for row in report.rows.iter().filter(|r| r.status != "ok") {
            eprintln!(
                "failed: {}/{} seed {}: {}",
                row.model, row.fairness, row.seed, row.error
            );
        }
        std::process::exit(1);
    }
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let (_, estimate) = load_soft_labels(&args.estimate)?;
    let (_, reference) = load_soft_labels(&args.reference)?;
    if args.class == 0 || args.class > estimate.num_classes() {
        bail!("--class must be in 1..={}", estimate.num_classes());
    }
    println!("mae={}", mae(&estimate, &reference)?);
    println!(
        "bias_class_{}={}",
        args.class,
        bias(&estimate, &reference, args.class - 1)?
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let config = PreprocessConfig {
        min_labels_female_voter: args.min_labels_female,
        min_labels_task: args.min_labels_task,
        default_gender_values: args
            .default_gender_values
            .split(',')
            .map(|v| v.trim().to_lowercase())
            .collect(),
        ..PreprocessConfig::default()
    };
    let (records, skipped) = parse_mm_csv(&args.input, &config)?;
    let mut output = preprocess_mm(records, &config)?;
    output.report.unparseable_rows += skipped;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    save_labels(&output.labels, &args.out.join("labels.csv"))?;
    save_labels_metadata(&output.labels, &args.out.join("labels.meta.json"))?;
    save_attributes(
        &output.attrs,
        &output.labels.voter_ids,
        &args.out.join("attributes.csv"),
    )?;
    let report_path = args.out.join("retention.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&output.report)?)?;

    for step in &output.report.steps {
        println!(
            "{:>16}: {} voters, {} tasks, {} labels",
            step.step, step.voters, step.tasks, step.labels
        );
    }
    println!(
        "skipped: {} unparseable rows, {} non-gender scenarios, {} duplicate labels",
        output.report.unparseable_rows,
        output.report.non_gender_scenarios,
        output.report.duplicate_labels
    );
    println!("wrote labels, attributes, retention report to {}", args.out.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let report = compare(&args.report_a, &args.report_b, args.threshold)?;
    println!(
        "compared {} rows: max |mae delta| = {}, max |bias delta| = {}",
        report.deltas.len(),
        report.max_mae_delta,
        report.max_bias_delta
    );
    if report.exceeding.is_empty() {
        println!("all deltas within threshold {}", args.threshold);
        Ok(())
    } else {
        for key in &report.exceeding {
            eprintln!("exceeds threshold: {key}");
        }
        eprintln!(
            "{} of {} rows exceed threshold {}",
            report.exceeding.len(),
            report.deltas.len(),
            args.threshold
        );
        std::process::exit(1);
    }
}
