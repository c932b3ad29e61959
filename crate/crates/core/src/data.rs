//! Core domain types and CSV ingestion/serialization.
//!
//! Labels are sparse: a `LabelMatrix` stores only observed (voter, task)
//! pairs. An unobserved pair simply has no entry; no sentinel value is ever
//! stored. Class labels are zero-based `0..K` everywhere in the library; the
//! CSV formats use one-based labels (`1..=K`) and the loaders convert at the
//! boundary.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for row-stochastic checks on probability rows.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Tolerance for the ideal attribute distribution normalization.
pub const IDEAL_DIST_TOL: f64 = 1e-12;

/// Sparse voter-by-task matrix of discrete class labels.
///
/// Internally keeps both voter-major and task-major adjacency so aggregation
/// code can scan either axis without rebuilding indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    num_voters: usize,
    num_tasks: usize,
    num_classes: usize,
    /// voter -> sorted (task, class) pairs
    by_voter: Vec<Vec<(usize, usize)>>,
    /// task -> sorted (voter, class) pairs
    by_task: Vec<Vec<(usize, usize)>>,
    num_labels: usize,
}

impl LabelMatrix {
    /// Builds a matrix from `(voter, task, class)` triples with zero-based
    /// indices and classes. Rejects out-of-range indices, invalid classes,
    /// and duplicate (voter, task) pairs.
    pub fn from_entries<I>(
        num_voters: usize,
        num_tasks: usize,
        num_classes: usize,
        entries: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, usize)>,
    {
        if num_voters == 0 || num_tasks == 0 {
            return Err(Error::Validation(
                "label matrix needs at least one voter and one task".into(),
            ));
        }
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "number of classes must be at least 2, got {num_classes}"
            )));
        }
        let mut by_voter = vec![Vec::new(); num_voters];
        let mut by_task = vec![Vec::new(); num_tasks];
        let mut num_labels = 0usize;
        for (voter, task, class) in entries {
            if voter >= num_voters {
                return Err(Error::Validation(format!(
                    "voter index {voter} out of range (num_voters = {num_voters})"
                )));
            }
            if task >= num_tasks {
                return Err(Error::Validation(format!(
                    "task index {task} out of range (num_tasks = {num_tasks})"
                )));
            }
            if class >= num_classes {
                return Err(Error::Validation(format!(
                    "class {class} out of range (num_classes = {num_classes})"
                )));
            }
            by_voter[voter].push((task, class));
            by_task[task].push((voter, class));
            num_labels += 1;
        }
        for (voter, labels) in by_voter.iter_mut().enumerate() {
            labels.sort_unstable();
            if labels.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Validation(format!(
                    "duplicate label for voter {voter}"
                )));
            }
        }
        for labels in by_task.iter_mut() {
            labels.sort_unstable();
        }
        Ok(LabelMatrix {
            num_voters,
            num_tasks,
            num_classes,
            by_voter,
            by_task,
            num_labels,
        })
    }

    pub fn num_voters(&self) -> usize {
        self.num_voters
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Sorted `(task, class)` labels given by one voter.
    pub fn voter_labels(&self, voter: usize) -> &[(usize, usize)] {
        &self.by_voter[voter]
    }

    /// Sorted `(voter, class)` labels observed on one task.
    pub fn task_labels(&self, task: usize) -> &[(usize, usize)] {
        &self.by_task[task]
    }

    pub fn get(&self, voter: usize, task: usize) -> Option<usize> {
        let labels = &self.by_voter[voter];
        labels
            .binary_search_by_key(&task, |&(t, _)| t)
            .ok()
            .map(|idx| labels[idx].1)
    }

    /// Iterates all `(voter, task, class)` triples in voter-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.by_voter
            .iter()
            .enumerate()
            .flat_map(|(v, labels)| labels.iter().map(move |&(t, c)| (v, t, c)))
    }

    pub fn is_fully_observed(&self) -> bool {
        self.num_labels == self.num_voters * self.num_tasks
    }
}

/// Per-voter binary attribute plus the ideal attribute distribution `p(a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    attributes: Vec<u8>,
    ideal_dist: [f64; 2],
}

impl AttributeTable {
    pub fn new(attributes: Vec<u8>, ideal_dist: (f64, f64)) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Validation("attribute table is empty".into()));
        }
        if let Some(pos) = attributes.iter().position(|&a| a > 1) {
            return Err(Error::Validation(format!(
                "attribute of voter {pos} is {} but must be 0 or 1",
                attributes[pos]
            )));
        }
        let (p0, p1) = ideal_dist;
        if !(p0.is_finite() && p1.is_finite()) || p0 < 0.0 || p1 < 0.0 {
            return Err(Error::Validation(format!(
                "ideal distribution ({p0}, {p1}) must be non-negative and finite"
            )));
        }
        if (p0 + p1 - 1.0).abs() > IDEAL_DIST_TOL {
            return Err(Error::Validation(format!(
                "ideal distribution ({p0}, {p1}) does not sum to 1"
            )));
        }
        Ok(AttributeTable {
            attributes,
            ideal_dist: [p0, p1],
        })
    }

    /// Balanced ideal distribution, `p(a=0) = p(a=1) = 0.5`.
    pub fn balanced(attributes: Vec<u8>) -> Result<Self> {
        AttributeTable::new(attributes, (0.5, 0.5))
    }

    pub fn num_voters(&self) -> usize {
        self.attributes.len()
    }

    pub fn attribute(&self, voter: usize) -> u8 {
        self.attributes[voter]
    }

    pub fn attributes(&self) -> &[u8] {
        &self.attributes
    }

    /// `p(a)` for `a` in `{0, 1}`.
    pub fn ideal(&self, attr: u8) -> f64 {
        self.ideal_dist[attr as usize]
    }

    pub fn ideal_dist(&self) -> (f64, f64) {
        (self.ideal_dist[0], self.ideal_dist[1])
    }

    /// Voter indices carrying the given attribute.
    pub fn voters_with(&self, attr: u8) -> Vec<usize> {
        self.attributes
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == attr)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Row-stochastic task-by-class matrix of aggregated opinions.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels {
    values: Vec<Vec<f64>>,
    num_classes: usize,
}

impl SoftLabels {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let num_classes = match values.first() {
            Some(row) => row.len(),
            None => return Err(Error::Validation("soft labels are empty".into())),
        };
        if num_classes < 2 {
            return Err(Error::Validation(
                "soft labels need at least two classes".into(),
            ));
        }
        for (j, row) in values.iter().enumerate() {
            if row.len() != num_classes {
                return Err(Error::Validation(format!(
                    "soft label row {j} has {} entries, expected {num_classes}",
                    row.len()
                )));
            }
            validate_prob_row(row, ROW_SUM_TOL)
                .map_err(|msg| Error::Validation(format!("soft label row {j}: {msg}")))?;
        }
        Ok(SoftLabels {
            values,
            num_classes,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.values.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, task: usize) -> &[f64] {
        &self.values[task]
    }

    pub fn get(&self, task: usize, class: usize) -> f64 {
        self.values[task][class]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.iter().map(|r| r.as_slice())
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.values
    }
}

/// Row-stochastic K-by-K voter reliability matrix. Row `k` is the reported
/// label distribution given that the truth is class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    values: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let k = values.len();
        if k < 2 {
            return Err(Error::Validation(
                "confusion matrix needs at least two classes".into(),
            ));
        }
        for (row_idx, row) in values.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Validation(format!(
                    "confusion matrix row {row_idx} has {} entries, expected {k}",
                    row.len()
                )));
            }
            validate_prob_row(row, ROW_SUM_TOL)
                .map_err(|msg| Error::Validation(format!("confusion matrix row {row_idx}: {msg}")))?;
        }
        Ok(ConfusionMatrix { values })
    }

    /// All entries `1/K`: a voter whose reports carry no information.
    pub fn uniform(num_classes: usize) -> Self {
        let row = vec![1.0 / num_classes as f64; num_classes];
        ConfusionMatrix {
            values: vec![row; num_classes],
        }
    }

    /// Identity matrix: a voter who always reports the true class.
    pub fn identity(num_classes: usize) -> Self {
        let values = (0..num_classes)
            .map(|k| {
                let mut row = vec![0.0; num_classes];
                row[k] = 1.0;
                row
            })
            .collect();
        ConfusionMatrix { values }
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, truth: usize) -> &[f64] {
        &self.values[truth]
    }

    pub fn get(&self, truth: usize, reported: usize) -> f64 {
        self.values[truth][reported]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Dirichlet hyperparameters: one row of `alpha` per confusion-matrix row,
/// `rho` for the soft-label prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletHyper {
    alpha: Vec<Vec<f64>>,
    rho: Vec<f64>,
}

impl DirichletHyper {
    pub fn new(alpha: Vec<Vec<f64>>, rho: Vec<f64>) -> Result<Self> {
        let k = rho.len();
        if k < 2 {
            return Err(Error::Validation(
                "dirichlet hyperparameters need at least two classes".into(),
            ));
        }
        if alpha.len() != k || alpha.iter().any(|row| row.len() != k) {
            return Err(Error::Validation(format!(
                "alpha must be a {k}x{k} matrix"
            )));
        }
        let all_positive = rho.iter().chain(alpha.iter().flatten()).all(|&v| v > 0.0 && v.is_finite());
        if !all_positive {
            return Err(Error::Validation(
                "dirichlet hyperparameters must be strictly positive".into(),
            ));
        }
        Ok(DirichletHyper { alpha, rho })
    }

    /// All hyperparameters 1: flat priors on both confusion rows and labels.
    pub fn flat(num_classes: usize) -> Self {
        DirichletHyper {
            alpha: vec![vec![1.0; num_classes]; num_classes],
            rho: vec![1.0; num_classes],
        }
    }

    /// Diagonally dominant prior on confusion rows (`diag` on the diagonal,
    /// `off` elsewhere) with a flat label prior.
    pub fn diagonal(num_classes: usize, diag: f64, off: f64) -> Result<Self> {
        let alpha = (0..num_classes)
            .map(|k| {
                (0..num_classes)
                    .map(|l| if k == l { diag } else { off })
                    .collect()
            })
            .collect();
        DirichletHyper::new(alpha, vec![1.0; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.rho.len()
    }

    pub fn alpha_row(&self, truth: usize) -> &[f64] {
        &self.alpha[truth]
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Prior mean of each confusion row, `alpha_k / sum(alpha_k)`.
    pub fn alpha_mean(&self) -> ConfusionMatrix {
        let values = self
            .alpha
            .iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                row.iter().map(|&a| a / total).collect()
            })
            .collect();
        ConfusionMatrix { values }
    }

    /// Prior mean of the label distribution, `rho / sum(rho)`.
    pub fn rho_mean(&self) -> Vec<f64> {
        let total: f64 = self.rho.iter().sum();
        self.rho.iter().map(|&r| r / total).collect()
    }
}

fn validate_prob_row(row: &[f64], tol: f64) -> std::result::Result<(), String> {
    let mut sum = 0.0;
    for &v in row {
        if !v.is_finite() || v < 0.0 {
            return Err(format!("entry {v} is negative or non-finite"));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > tol {
        return Err(format!("row sums to {sum}, expected 1"));
    }
    Ok(())
}

/// Checks the cross-consistency of a label matrix and attribute table.
pub fn validate(matrix: &LabelMatrix, attrs: &AttributeTable) -> Result<()> {
    if attrs.num_voters() != matrix.num_voters() {
        return Err(Error::Validation(format!(
            "attribute table has {} voters but label matrix has {}",
            attrs.num_voters(),
            matrix.num_voters()
        )));
    }
    Ok(())
}

/// A label matrix together with the original string ids of its voters and
/// tasks, in dense-index order.
#[derive(Debug, Clone)]
pub struct LoadedLabels {
    pub matrix: LabelMatrix,
    pub voter_ids: Vec<String>,
    pub task_ids: Vec<String>,
}

impl LoadedLabels {
    /// Wraps a matrix with generated ids `v1..vI` / `t1..tJ`.
    pub fn with_generated_ids(matrix: LabelMatrix) -> Self {
        let voter_ids = (1..=matrix.num_voters()).map(|i| format!("v{i}")).collect();
        let task_ids = (1..=matrix.num_tasks()).map(|j| format!("t{j}")).collect();
        LoadedLabels {
            matrix,
            voter_ids,
            task_ids,
        }
    }
}

/// Sidecar metadata describing a labels CSV: dimensions and id maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelsMetadata {
    pub num_voters: usize,
    pub num_tasks: usize,
    pub num_classes: usize,
    pub num_labels: usize,
    pub voter_ids: Vec<String>,
    pub task_ids: Vec<String>,
}

/// Loads a labels CSV with header `voter_id,task_id,label`.
///
/// Voter and task ids are arbitrary strings mapped to dense indices in order
/// of first appearance; labels in the file are one-based `1..=K`.
pub fn load_labels(path: &Path, num_classes: usize) -> Result<LoadedLabels> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;

    let mut voter_index = HashMap::new();
    let mut task_index = HashMap::new();
    let mut voter_ids = Vec::new();
    let mut task_ids = Vec::new();
    let mut entries = Vec::new();

    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 3 fields (voter_id,task_id,label), got {}", record.len()),
            ));
        }
        let voter_id = record.get(0).unwrap();
        let task_id = record.get(1).unwrap();
        let label: i64 = record
            .get(2)
            .unwrap()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("label '{}' is not an integer", &record[2])))?;
        if label < 1 || label as usize > num_classes {
            return Err(Error::Validation(format!(
                "label {label} at {}:{line} outside 1..={num_classes}",
                path.display()
            )));
        }
        let next_voter = voter_index.len();
        let voter = *voter_index.entry(voter_id.to_string()).or_insert_with(|| {
            voter_ids.push(voter_id.to_string());
            next_voter
        });
        let next_task = task_index.len();
        let task = *task_index.entry(task_id.to_string()).or_insert_with(|| {
            task_ids.push(task_id.to_string());
            next_task
        });
        entries.push((voter, task, label as usize - 1, line));
    }

    if entries.is_empty() {
        return Err(Error::Validation(format!(
            "{} contains no label records",
            path.display()
        )));
    }

    let mut seen = HashMap::new();
    for &(voter, task, _, line) in &entries {
        if let Some(prev) = seen.insert((voter, task), line) {
            return Err(Error::Validation(format!(
                "duplicate label for voter '{}' on task '{}' at {}:{line} (first at line {prev})",
                voter_ids[voter],
                task_ids[task],
                path.display()
            )));
        }
    }

    let matrix = LabelMatrix::from_entries(
        voter_ids.len(),
        task_ids.len(),
        num_classes,
        entries.iter().map(|&(v, t, c, _)| (v, t, c)),
    )?;
    Ok(LoadedLabels {
        matrix,
        voter_ids,
        task_ids,
    })
}

/// Writes a labels CSV (`voter_id,task_id,label`, one-based labels).
pub fn save_labels(labels: &LoadedLabels, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "voter_id,task_id,label").map_err(|e| Error::io(path, e))?;
    for (voter, task, class) in labels.matrix.entries() {
        writeln!(
            file,
            "{},{},{}",
            labels.voter_ids[voter],
            labels.task_ids[task],
            class + 1
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes the structured-metadata sidecar for a labels CSV.
pub fn save_labels_metadata(labels: &LoadedLabels, path: &Path) -> Result<()> {
    let meta = LabelsMetadata {
        num_voters: labels.matrix.num_voters(),
        num_tasks: labels.matrix.num_tasks(),
        num_classes: labels.matrix.num_classes(),
        num_labels: labels.matrix.num_labels(),
        voter_ids: labels.voter_ids.clone(),
        task_ids: labels.task_ids.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Validation(format!("cannot serialize metadata: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_labels_metadata(path: &Path) -> Result<LabelsMetadata> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

/// Loads an attributes CSV with header `voter_id,attribute` and aligns it to
/// the given voter-id order. Every voter must appear exactly once.
pub fn load_attributes(
    path: &Path,
    voter_ids: &[String],
    ideal_dist: (f64, f64),
) -> Result<AttributeTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let index: HashMap<&str, usize> = voter_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut attributes: Vec<Option<u8>> = vec![None; voter_ids.len()];
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 2 fields (voter_id,attribute), got {}", record.len()),
            ));
        }
        let voter_id = record.get(0).unwrap();
        let attr: u8 = record
            .get(1)
            .unwrap()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("attribute '{}' is not 0 or 1", &record[1])))?;
        if attr > 1 {
            return Err(Error::Validation(format!(
                "attribute {attr} at {}:{line} must be 0 or 1",
                path.display()
            )));
        }
        let &voter = index.get(voter_id).ok_or_else(|| {
            Error::Validation(format!(
                "attributes file names unknown voter '{voter_id}' at {}:{line}",
                path.display()
            ))
        })?;
        if attributes[voter].replace(attr).is_some() {
            return Err(Error::Validation(format!(
                "duplicate attribute for voter '{voter_id}' at {}:{line}",
                path.display()
            )));
        }
    }
    let attributes = attributes
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            a.ok_or_else(|| {
                Error::Validation(format!("voter '{}' missing from attributes file", voter_ids[i]))
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    AttributeTable::new(attributes, ideal_dist)
}

/// Writes an attributes CSV (`voter_id,attribute`).
pub fn save_attributes(attrs: &AttributeTable, voter_ids: &[String], path: &Path) -> Result<()> {
    if voter_ids.len() != attrs.num_voters() {
        return Err(Error::Validation(format!(
            "{} voter ids for {} attributes",
            voter_ids.len(),
            attrs.num_voters()
        )));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "voter_id,attribute").map_err(|e| Error::io(path, e))?;
    for (id, &a) in voter_ids.iter().zip(attrs.attributes()) {
        writeln!(file, "{id},{a}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes soft labels as CSV with header `task_id,class_1,...,class_K`.
///
/// `task_ids` defaults to `t1..tJ` when not supplied. Floats are written in
/// shortest round-trip form, so a save/load round trip is exact.
pub fn save_soft_labels(labels: &SoftLabels, task_ids: Option<&[String]>, path: &Path) -> Result<()> {
    write_task_rows(labels, task_ids, path, "class")
}

/// Writes ground-truth soft labels with header `task_id,true_class_1,...`.
pub fn save_ground_truth(labels: &SoftLabels, task_ids: Option<&[String]>, path: &Path) -> Result<()> {
    write_task_rows(labels, task_ids, path, "true_class")
}

fn write_task_rows(
    labels: &SoftLabels,
    task_ids: Option<&[String]>,
    path: &Path,
    column_prefix: &str,
) -> Result<()> {
    if let Some(ids) = task_ids {
        if ids.len() != labels.num_tasks() {
            return Err(Error::Validation(format!(
                "{} task ids for {} soft label rows",
                ids.len(),
                labels.num_tasks()
            )));
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header: Vec<String> = std::iter::once("task_id".to_string())
        .chain((1..=labels.num_classes()).map(|k| format!("{column_prefix}_{k}")))
        .collect();
    writeln!(file, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for (j, row) in labels.rows().enumerate() {
        let id = match task_ids {
            Some(ids) => ids[j].clone(),
            None => format!("t{}", j + 1),
        };
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{id},{}", cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads a soft-label CSV written by [`save_soft_labels`] (or a ground-truth
/// file; the header prefix is not checked beyond the task_id column).
pub fn load_soft_labels(path: &Path) -> Result<(Vec<String>, SoftLabels)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let mut task_ids = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() < 3 {
            return Err(Error::parse(path, line, "expected task_id plus at least two class columns"));
        }
        task_ids.push(record.get(0).unwrap().to_string());
        let row = record
            .iter()
            .skip(1)
            .map(|cell| {
                cell.parse::<f64>()
                    .map_err(|_| Error::parse(path, line, format!("'{cell}' is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!(
            "{} contains no soft label rows",
            path.display()
        )));
    }
    Ok((task_ids, SoftLabels::new(rows)?))
}
