//! Fairness-aware opinion aggregation.
//!
//! Estimates per-task soft labels (probability vectors over classes) from
//! sparse voter labels, with three aggregation models — majority voting,
//! Dawid-Skene, and Soft Dawid-Skene — and three voter-attribute fairness
//! options: sample weighting, data splitting, and GroupAnno confusion-matrix
//! decomposition. Includes seeded synthetic-data generators, evaluation
//! metrics, a Moral Machine preprocessing pipeline, and a reproducible
//! experiment runner.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fairness;
pub mod metrics;
pub mod moral_machine;
pub mod simplex;
pub mod synthgen;

pub use aggregation::{
    ds_e_step, ds_fit, ds_lower_bound, ds_m_step, log_posterior, mv_aggregate, soft_ds_fit,
    DsFitResult, DsModelState, DsOptions, SoftDsFitResult, SoftDsOptions, WeightedLabels,
};
pub use data::{
    load_attributes, load_labels, load_soft_labels, save_attributes, save_ground_truth,
    save_labels, save_soft_labels, validate, AttributeTable, ConfusionMatrix, DirichletHyper,
    LabelMatrix, LoadedLabels, SoftLabels,
};
pub use error::{Error, Result};
pub use experiment::{
    aggregate_with_options, compare, run, AggregateOptions, ExperimentConfig, ExperimentKind,
    FairnessOption, MetricsRow, ModelKind, RunOptions, RunReport,
};
pub use fairness::{
    groupanno_combine, groupanno_fit, sample_weights, split_aggregate, weighted_mv, GroupAnnoBase,
    GroupAnnoFitResult, GroupAnnoOptions, GroupAnnoOutput, GroupAnnoState, SplitWarning,
};
pub use metrics::{bias, mae};
pub use moral_machine::{
    parse_mm_csv, preprocess_mm, PreprocessConfig, PreprocessOutput, RetentionReport,
    SessionRecord,
};
pub use simplex::{
    maximize_on_simplex, maximize_on_simplex_rows, project_simplex, SimplexPoint, SolveOutcome,
    SolveStatus, SolverOptions,
};
pub use synthgen::{
    flip_labels, gen_biased_data, gen_softds_data, gen_spammer_data, subsample_voters, GenSpec,
    GroundTruthBundle,
};
