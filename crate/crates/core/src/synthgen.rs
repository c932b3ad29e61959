//! Seeded synthetic-data generators.
//!
//! Every generator derives independent RNG substreams from one root seed
//! with a documented counter scheme: substream(seed, domain, index), where
//! the domain separates voter parameters, task labels, per-voter label
//! draws, flips, and subsampling. Voter parameters depend only on the voter
//! index, so growing the task count never reshuffles voters (and vice
//! versa).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Beta;

use crate::data::{AttributeTable, ConfusionMatrix, LabelMatrix, SoftLabels};
use crate::error::{Error, Result};
use crate::fairness::groupanno_combine;

const DOMAIN_VOTER: u64 = 1;
const DOMAIN_TASK: u64 = 2;
const DOMAIN_LABELS: u64 = 3;
const DOMAIN_FLIP: u64 = 4;
const DOMAIN_SUBSAMPLE: u64 = 5;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// RNG for stream (`domain`, `index`) under the root seed.
fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let w0 = splitmix64(seed ^ splitmix64(domain));
    let w1 = splitmix64(w0 ^ index);
    let w2 = splitmix64(w1);
    let w3 = splitmix64(w2);
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&w0.to_le_bytes());
    key[8..16].copy_from_slice(&w1.to_le_bytes());
    key[16..24].copy_from_slice(&w2.to_le_bytes());
    key[24..32].copy_from_slice(&w3.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Declarative description of one synthetic dataset.
#[derive(Debug, Clone)]
pub struct GenSpec {
    /// Voters per attribute value; attribute 0 voters come first.
    pub num_voters_per_attr: (usize, usize),
    pub num_tasks: usize,
    pub num_classes: usize,
    /// Beta shape for confusion-matrix diagonals.
    pub diag_beta: (f64, f64),
    /// Beta shape for the class-0 component of each true soft label.
    pub z_beta: (f64, f64),
    /// Per-attribute group matrices used by the biased generator.
    pub group_matrices: Option<[ConfusionMatrix; 2]>,
    /// Extra uninformative voters appended by the spammer generator.
    pub num_spammers: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_voters_per_attr: (1000, 0),
            num_tasks: 100,
            num_classes: 2,
            diag_beta: (18.0, 2.0),
            z_beta: (10.0, 10.0),
            group_matrices: None,
            num_spammers: 0,
            seed: 0,
        }
    }
}

impl GenSpec {
    fn validate_beta_based(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Config(
                "beta-based generation is binary; num_classes must be 2".into(),
            ));
        }
        let (i0, i1) = self.num_voters_per_attr;
        if i0 + i1 == 0 {
            return Err(Error::Config("at least one voter is required".into()));
        }
        if self.num_tasks == 0 {
            return Err(Error::Config("at least one task is required".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.diag_beta.0)
            && positive(self.diag_beta.1)
            && positive(self.z_beta.0)
            && positive(self.z_beta.1))
        {
            return Err(Error::Config("beta shapes must be positive".into()));
        }
        Ok(())
    }

    fn num_voters(&self) -> usize {
        self.num_voters_per_attr.0 + self.num_voters_per_attr.1
    }
}

/// A generated dataset with its ground truth: the labels, voter attributes,
/// true soft labels, and the confusion matrices that produced the labels.
#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    pub labels: LabelMatrix,
    pub attrs: AttributeTable,
    pub true_soft: SoftLabels,
    pub true_confusions: Vec<ConfusionMatrix>,
}

fn sample_confusion(spec: &GenSpec, voter: usize) -> ConfusionMatrix {
    let mut rng = substream(spec.seed, DOMAIN_VOTER, voter as u64);
    let beta = Beta::new(spec.diag_beta.0, spec.diag_beta.1).expect("validated shapes");
    let d0: f64 = beta.sample(&mut rng);
    let d1: f64 = beta.sample(&mut rng);
    ConfusionMatrix::new(vec![vec![d0, 1.0 - d0], vec![1.0 - d1, d1]]).expect("rows sum to 1")
}

fn sample_soft_labels(spec: &GenSpec) -> SoftLabels {
    let beta = Beta::new(spec.z_beta.0, spec.z_beta.1).expect("validated shapes");
    let rows = (0..spec.num_tasks)
        .map(|task| {
            let mut rng = substream(spec.seed, DOMAIN_TASK, task as u64);
            let z0: f64 = beta.sample(&mut rng);
            vec![z0, 1.0 - z0]
        })
        .collect();
    SoftLabels::new(rows).expect("rows sum to 1")
}

/// One label draw from Categorical(confusion^T z).
fn sample_label(rng: &mut ChaCha8Rng, confusion: &ConfusionMatrix, z: &[f64]) -> usize {
    let k = z.len();
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut cumulative = 0.0;
    for class in 0..k {
        let p: f64 = (0..k).map(|truth| confusion.get(truth, class) * z[truth]).sum();
        cumulative += p;
        if u < cumulative {
            return class;
        }
    }
    k - 1
}

fn attributes_by_index(spec: &GenSpec, total_voters: usize) -> Result<AttributeTable> {
    let (i0, _) = spec.num_voters_per_attr;
    let attributes = (0..total_voters).map(|v| u8::from(v >= i0)).collect();
    AttributeTable::balanced(attributes)
}

fn generate(spec: &GenSpec, confusions: Vec<ConfusionMatrix>) -> Result<GroundTruthBundle> {
    let true_soft = sample_soft_labels(spec);
    let num_voters = confusions.len();
    let mut entries = Vec::with_capacity(num_voters * spec.num_tasks);
    for (voter, confusion) in confusions.iter().enumerate() {
        let mut rng = substream(spec.seed, DOMAIN_LABELS, voter as u64);
        for task in 0..spec.num_tasks {
            let class = sample_label(&mut rng, confusion, true_soft.row(task));
            entries.push((voter, task, class));
        }
    }
    let labels = LabelMatrix::from_entries(num_voters, spec.num_tasks, spec.num_classes, entries)?;
    let attrs = attributes_by_index(spec, num_voters)?;
    Ok(GroundTruthBundle {
        labels,
        attrs,
        true_soft,
        true_confusions: confusions,
    })
}

/// Fully observed labels from the Soft D&S generative process: confusion
/// diagonals Beta-distributed per voter, true soft labels Beta-distributed
/// per task, labels Categorical(pi^T z).
pub fn gen_softds_data(spec: &GenSpec) -> Result<GroundTruthBundle> {
    spec.validate_beta_based()?;
    if spec.group_matrices.is_some() {
        return Err(Error::Config(
            "group matrices are not used by the soft-label generator; use the biased generator"
                .into(),
        ));
    }
    let confusions = (0..spec.num_voters())
        .map(|v| sample_confusion(spec, v))
        .collect();
    generate(spec, confusions)
}

/// As [`gen_softds_data`], then appends `num_spammers` voters whose
/// confusion matrices are all-1/K (attribute 0, label streams of their own).
pub fn gen_spammer_data(spec: &GenSpec) -> Result<GroundTruthBundle> {
    spec.validate_beta_based()?;
    let normal = spec.num_voters();
    let mut confusions: Vec<ConfusionMatrix> = (0..normal)
        .map(|v| sample_confusion(spec, v))
        .collect();
    confusions.extend(std::iter::repeat_n(
        ConfusionMatrix::uniform(spec.num_classes),
        spec.num_spammers,
    ));
    generate(spec, confusions)
}

/// Labels biased by voter attribute: each voter's effective confusion matrix
/// is the average of its individual matrix and its attribute's group matrix.
/// The bundle's confusions are the effective matrices that generated labels.
pub fn gen_biased_data(spec: &GenSpec) -> Result<GroundTruthBundle> {
    spec.validate_beta_based()?;
    let group = spec
        .group_matrices
        .as_ref()
        .ok_or_else(|| Error::Config("biased generation requires group matrices".into()))?;
    if group.iter().any(|m| m.num_classes() != spec.num_classes) {
        return Err(Error::Config("group matrices have the wrong class count".into()));
    }
    let (i0, _) = spec.num_voters_per_attr;
    let confusions = (0..spec.num_voters())
        .map(|v| {
            let individual = sample_confusion(spec, v);
            let attr = usize::from(v >= i0);
            groupanno_combine(&individual, &group[attr])
        })
        .collect::<Result<Vec<ConfusionMatrix>>>()?;
    generate(spec, confusions)
}

/// Replaces each observed label, independently with probability `flip_rate`,
/// by the voter attribute's preferred class (which may equal the original
/// label); otherwise the label is kept.
pub fn flip_labels(
    data: &LabelMatrix,
    attrs: &AttributeTable,
    class_for_attr: [usize; 2],
    flip_rate: f64,
    seed: u64,
) -> Result<LabelMatrix> {
    crate::data::validate(data, attrs)?;
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::Config(format!(
            "flip rate {flip_rate} outside [0, 1]"
        )));
    }
    if class_for_attr.iter().any(|&c| c >= data.num_classes()) {
        return Err(Error::Config("preferred class out of range".into()));
    }
    let mut entries = Vec::with_capacity(data.num_labels());
    for voter in 0..data.num_voters() {
        let mut rng = substream(seed, DOMAIN_FLIP, voter as u64);
        let preferred = class_for_attr[attrs.attribute(voter) as usize];
        for &(task, class) in data.voter_labels(voter) {
            let u: f64 = rng.gen_range(0.0..1.0);
            let new_class = if u < flip_rate { preferred } else { class };
            entries.push((voter, task, new_class));
        }
    }
    LabelMatrix::from_entries(data.num_voters(), data.num_tasks(), data.num_classes(), entries)
}

/// Uniformly keeps the requested fraction of voters within each attribute
/// group (rounded to the nearest count), drops the others' labels, and
/// densely reindexes the survivors. Task indices are unchanged.
pub fn subsample_voters(
    data: &LabelMatrix,
    attrs: &AttributeTable,
    keep_fraction_per_attr: [f64; 2],
    seed: u64,
) -> Result<(LabelMatrix, AttributeTable)> {
    crate::data::validate(data, attrs)?;
    for &f in &keep_fraction_per_attr {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!(
                "keep fraction {f} outside (0, 1]"
            )));
        }
    }
    let mut kept = Vec::new();
    for attr in 0..2u8 {
        let members = attrs.voters_with(attr);
        if members.is_empty() {
            continue;
        }
        let target = (keep_fraction_per_attr[attr as usize] * members.len() as f64).round() as usize;
        if target == 0 {
            return Err(Error::Config(format!(
                "attribute {attr} would be sampled down to zero voters"
            )));
        }
        let mut rng = substream(seed, DOMAIN_SUBSAMPLE, attr as u64);
        let mut chosen = rand::seq::index::sample(&mut rng, members.len(), target.min(members.len()))
            .into_vec();
        chosen.sort_unstable();
        kept.extend(chosen.into_iter().map(|idx| members[idx]));
    }
    kept.sort_unstable();

    let mut voter_map = vec![usize::MAX; data.num_voters()];
    for (dense, &voter) in kept.iter().enumerate() {
        voter_map[voter] = dense;
    }
    let entries = data
        .entries()
        .filter(|&(v, _, _)| voter_map[v] != usize::MAX)
        .map(|(v, t, c)| (voter_map[v], t, c));
    let matrix = LabelMatrix::from_entries(kept.len(), data.num_tasks(), data.num_classes(), entries)?;
    let attributes = kept.iter().map(|&v| attrs.attribute(v)).collect();
    let table = AttributeTable::new(attributes, attrs.ideal_dist())?;
    Ok((matrix, table))
}
