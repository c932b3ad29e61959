//! Fairness options composable with the aggregation models: sample
//! weighting, data splitting, and the GroupAnno confusion-matrix
//! decomposition.

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::aggregation::{
    ds_e_step, ds_lower_bound, mv_aggregate, DsModelState, WeightedLabels, PROB_CLIP,
};
use crate::data::{
    validate, AttributeTable, ConfusionMatrix, DirichletHyper, LabelMatrix, SoftLabels,
};
use crate::error::{Error, Result};
use crate::simplex::{maximize_on_simplex_rows, SolverOptions};

/// Weights every observed label so each task's attribute mix matches the
/// ideal distribution: `w_ij = p~_j(a_i) * N_j / N_j^(a_i)`, where `p~_j`
/// renormalizes the ideal distribution over the attributes actually present
/// in task j. Per task the weights sum to the observed label count.
pub fn sample_weights(data: &LabelMatrix, attrs: &AttributeTable) -> Result<WeightedLabels> {
    validate(data, attrs)?;
    let mut weights = std::collections::HashMap::new();
    for task in 0..data.num_tasks() {
        let labels = data.task_labels(task);
        if labels.is_empty() {
            return Err(Error::Validation(format!(
                "task {task} has no observed labels"
            )));
        }
        let total = labels.len() as f64;
        let mut group_count = [0.0_f64; 2];
        for &(voter, _) in labels {
            group_count[attrs.attribute(voter) as usize] += 1.0;
        }
        let mut ideal = [attrs.ideal(0), attrs.ideal(1)];
        let present_mass: f64 = (0..2)
            .filter(|&a| group_count[a] > 0.0)
            .map(|a| ideal[a])
            .sum();
        for (a, slot) in ideal.iter_mut().enumerate() {
            if group_count[a] == 0.0 {
                *slot = 0.0;
            } else if present_mass > 0.0 {
                *slot /= present_mass;
            } else {
                // Ideal mass sits entirely on absent attributes; fall back
                // to uniform over the attributes present.
                *slot = 1.0 / group_count.iter().filter(|&&c| c > 0.0).count() as f64;
            }
        }
        for &(voter, _) in labels {
            let a = attrs.attribute(voter) as usize;
            weights.insert((voter, task), ideal[a] * total / group_count[a]);
        }
    }
    WeightedLabels::with_weights(data.clone(), &weights)
}

/// Convenience composition: weighted majority voting.
pub fn weighted_mv(data: &LabelMatrix, attrs: &AttributeTable) -> Result<SoftLabels> {
    mv_aggregate(&sample_weights(data, attrs)?)
}

/// A task that could not be estimated from one attribute group because that
/// group gave it no labels; the other group's estimate was used as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct SplitWarning {
    pub task: usize,
    pub missing_attr: u8,
}

/// Runs `model` separately on each attribute group's labels and combines the
/// estimates as `p(a=0) * Z^(0) + p(a=1) * Z^(1)`.
///
/// Tasks unlabeled by one group fall back to the covered group's estimate,
/// recorded in the returned warnings. The two sub-fits run concurrently.
pub fn split_aggregate<F>(
    data: &LabelMatrix,
    attrs: &AttributeTable,
    model: F,
) -> Result<(SoftLabels, Vec<SplitWarning>)>
where
    F: Fn(&LabelMatrix) -> Result<SoftLabels> + Sync,
{
    validate(data, attrs)?;
    let splits: Vec<Option<SplitData>> = [0u8, 1u8]
        .iter()
        .map(|&a| SplitData::build(data, attrs, a))
        .collect::<Result<_>>()?;
    let (est0, est1) = rayon::join(
        || splits[0].as_ref().map(|s| model(&s.matrix)).transpose(),
        || splits[1].as_ref().map(|s| model(&s.matrix)).transpose(),
    );
    let estimates = [est0?, est1?];

    // Scatter each split's rows back to the full task range.
    let k = data.num_classes();
    let mut per_group: Vec<Vec<Option<&[f64]>>> = vec![vec![None; data.num_tasks()]; 2];
    for a in 0..2 {
        if let (Some(split), Some(est)) = (&splits[a], &estimates[a]) {
            if est.num_tasks() != split.tasks.len() || est.num_classes() != k {
                return Err(Error::Validation(format!(
                    "model returned {}x{} soft labels for a split with {} tasks",
                    est.num_tasks(),
                    est.num_classes(),
                    split.tasks.len()
                )));
            }
            for (local, &task) in split.tasks.iter().enumerate() {
                per_group[a][task] = Some(est.row(local));
            }
        }
    }

    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(data.num_tasks());
    for task in 0..data.num_tasks() {
        let row = match (per_group[0][task], per_group[1][task]) {
            (Some(z0), Some(z1)) => (0..k)
                .map(|c| attrs.ideal(0) * z0[c] + attrs.ideal(1) * z1[c])
                .collect(),
            (Some(z0), None) => {
                warnings.push(SplitWarning {
                    task,
                    missing_attr: 1,
                });
                z0.to_vec()
            }
            (None, Some(z1)) => {
                warnings.push(SplitWarning {
                    task,
                    missing_attr: 0,
                });
                z1.to_vec()
            }
            (None, None) => {
                return Err(Error::Validation(format!(
                    "task {task} has no observed labels"
                )))
            }
        };
        rows.push(row);
    }
    Ok((SoftLabels::new(rows)?, warnings))
}

struct SplitData {
    matrix: LabelMatrix,
    /// Original task index of each dense task in the split.
    tasks: Vec<usize>,
}

impl SplitData {
    /// Restricts the matrix to voters with the given attribute, densely
    /// reindexing voters and covered tasks. `None` when the group is empty.
    fn build(data: &LabelMatrix, attrs: &AttributeTable, attr: u8) -> Result<Option<SplitData>> {
        let voters = attrs.voters_with(attr);
        if voters.is_empty() {
            return Ok(None);
        }
        let mut task_map = vec![usize::MAX; data.num_tasks()];
        let mut tasks = Vec::new();
        let mut entries = Vec::new();
        for (local_v, &voter) in voters.iter().enumerate() {
            for &(task, class) in data.voter_labels(voter) {
                if task_map[task] == usize::MAX {
                    task_map[task] = tasks.len();
                    tasks.push(task);
                }
                entries.push((local_v, task_map[task], class));
            }
        }
        if tasks.is_empty() {
            return Ok(None);
        }
        let matrix =
            LabelMatrix::from_entries(voters.len(), tasks.len(), data.num_classes(), entries)?;
        Ok(Some(SplitData { matrix, tasks }))
    }
}

/// Entrywise average of an individual and a group confusion matrix.
pub fn groupanno_combine(
    individual: &ConfusionMatrix,
    group: &ConfusionMatrix,
) -> Result<ConfusionMatrix> {
    let k = individual.num_classes();
    if group.num_classes() != k {
        return Err(Error::Validation(format!(
            "cannot combine {k}-class and {}-class confusion matrices",
            group.num_classes()
        )));
    }
    let rows = (0..k)
        .map(|truth| {
            (0..k)
                .map(|l| 0.5 * (individual.get(truth, l) + group.get(truth, l)))
                .collect()
        })
        .collect();
    ConfusionMatrix::new(rows)
}

/// Which base model GroupAnno decorates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupAnnoBase {
    Ds,
    SoftDs,
}

/// What the fit returns as soft labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupAnnoOutput {
    /// Option 1: the converged posteriors/soft labels.
    Direct,
    /// Option 2: one extra posterior/soft-label maximization using each
    /// voter's group matrix `P^(a_i)` as its confusion matrix and
    /// sample-weighted labels, starting from the converged values.
    GroupReweighted,
}

#[derive(Debug, Clone)]
pub struct GroupAnnoOptions {
    pub output: GroupAnnoOutput,
    /// When false the group matrices stay at their initialization.
    pub update_group: bool,
    /// Group matrices start uniform unless given here.
    pub init_group: Option<[ConfusionMatrix; 2]>,
    /// D&S base: largest absolute posterior change; Soft D&S base: relative
    /// objective improvement.
    pub tol: f64,
    pub max_rounds: usize,
    pub inner: SolverOptions,
}

impl Default for GroupAnnoOptions {
    fn default() -> Self {
        GroupAnnoOptions {
            output: GroupAnnoOutput::Direct,
            update_group: true,
            init_group: None,
            tol: 1e-6,
            max_rounds: 100,
            inner: SolverOptions::default(),
        }
    }
}

/// Decomposed confusion matrices after a GroupAnno fit.
#[derive(Debug, Clone)]
pub struct GroupAnnoState {
    pub individual: Vec<ConfusionMatrix>,
    pub group: [ConfusionMatrix; 2],
    pub effective: Vec<ConfusionMatrix>,
}

#[derive(Debug, Clone)]
pub struct GroupAnnoFitResult {
    pub soft_labels: SoftLabels,
    pub state: GroupAnnoState,
    /// D&S base: lower bound per round. Soft D&S base: log posterior at
    /// initialization and per round. Non-decreasing either way.
    pub objective_trace: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
}

/// Fits the base model with every voter's confusion matrix decomposed as
/// `(pi^(i) + P^(a_i)) / 2`, alternating individual-row and group-row
/// updates, then produces soft labels per the selected output option.
pub fn groupanno_fit(
    data: &LabelMatrix,
    attrs: &AttributeTable,
    base: GroupAnnoBase,
    hyper: &DirichletHyper,
    opts: &GroupAnnoOptions,
) -> Result<GroupAnnoFitResult> {
    validate(data, attrs)?;
    let k = data.num_classes();
    if hyper.num_classes() != k {
        return Err(Error::Validation(format!(
            "hyperparameters are for {} classes but data has {k}",
            hyper.num_classes()
        )));
    }
    if let Some(group) = &opts.init_group {
        if group.iter().any(|m| m.num_classes() != k) {
            return Err(Error::Validation(
                "initial group matrices have wrong shape".into(),
            ));
        }
    }
    match base {
        GroupAnnoBase::SoftDs => groupanno_soft_ds(data, attrs, hyper, opts),
        GroupAnnoBase::Ds => groupanno_ds(data, attrs, hyper, opts),
    }
}

fn flat(m: &ConfusionMatrix) -> Vec<f64> {
    m.rows().iter().flatten().cloned().collect()
}

fn unflat(v: Vec<f64>, k: usize) -> Result<ConfusionMatrix> {
    ConfusionMatrix::new(v.chunks_exact(k).map(|r| r.to_vec()).collect())
}

fn effective_flat(pi: &[f64], group: &[f64]) -> Vec<f64> {
    pi.iter().zip(group).map(|(a, b)| 0.5 * (a + b)).collect()
}

fn dirichlet_log_norm(alpha: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    ln_gamma(total) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
}

fn dirichlet_log_pdf(x: &[f64], alpha: &[f64], log_norm: f64) -> f64 {
    log_norm
        + x.iter()
            .zip(alpha)
            .map(|(&v, &a)| (a - 1.0) * v.max(PROB_CLIP).ln())
            .sum::<f64>()
}

/// Soft D&S likelihood of one voter's labels under effective confusions
/// `(pi + group)/2`. The partial derivative is `0.5 * z_k / p` with respect
/// to either factor, so one gradient accumulator serves both updates.
fn soft_likelihood_term(
    pi: &[f64],
    group: &[f64],
    mut grad: Option<&mut [f64]>,
    voter: usize,
    data: &WeightedLabels,
    z: &[Vec<f64>],
    k: usize,
) -> f64 {
    let mut total = 0.0;
    for (task, class, w) in data.voter_labels(voter) {
        let zr = &z[task];
        let mut p = 0.0;
        for truth in 0..k {
            p += 0.5 * (pi[truth * k + class] + group[truth * k + class]) * zr[truth];
        }
        let p = p.max(PROB_CLIP);
        total += w * p.ln();
        if let Some(g) = grad.as_deref_mut() {
            for truth in 0..k {
                g[truth * k + class] += w * 0.5 * zr[truth] / p;
            }
        }
    }
    total
}

fn groupanno_soft_ds(
    data: &LabelMatrix,
    attrs: &AttributeTable,
    hyper: &DirichletHyper,
    opts: &GroupAnnoOptions,
) -> Result<GroupAnnoFitResult> {
    let k = data.num_classes();
    let weighted = WeightedLabels::unit(data.clone());
    let mut z: Vec<Vec<f64>> = mv_aggregate(&weighted)?
        .rows()
        .map(|r| r.to_vec())
        .collect();
    let mut pis: Vec<Vec<f64>> = vec![flat(&hyper.alpha_mean()); data.num_voters()];
    let mut group: [Vec<f64>; 2] = match &opts.init_group {
        Some([g0, g1]) => [flat(g0), flat(g1)],
        None => [
            flat(&ConfusionMatrix::uniform(k)),
            flat(&ConfusionMatrix::uniform(k)),
        ],
    };

    let alpha: Vec<Vec<f64>> = (0..k).map(|t| hyper.alpha_row(t).to_vec()).collect();
    let alpha_log_norm: Vec<f64> = alpha.iter().map(|row| dirichlet_log_norm(row)).collect();
    let rho_log_norm = dirichlet_log_norm(hyper.rho());

    let objective = |pis: &[Vec<f64>], group: &[Vec<f64>; 2], z: &[Vec<f64>]| -> f64 {
        let per_voter: Vec<f64> = (0..data.num_voters())
            .into_par_iter()
            .map(|voter| {
                let mut total = 0.0;
                for truth in 0..k {
                    let row = &pis[voter][truth * k..(truth + 1) * k];
                    total += dirichlet_log_pdf(row, &alpha[truth], alpha_log_norm[truth]);
                }
                total
                    + soft_likelihood_term(
                        &pis[voter],
                        &group[attrs.attribute(voter) as usize],
                        None,
                        voter,
                        &weighted,
                        z,
                        k,
                    )
            })
            .collect();
        per_voter.iter().sum::<f64>()
            + z.iter()
                .map(|zr| dirichlet_log_pdf(zr, hyper.rho(), rho_log_norm))
                .sum::<f64>()
    };

    let mut trace = vec![objective(&pis, &group, &z)];
    let mut rounds = 0;
    let mut converged = false;
    for _ in 0..opts.max_rounds {
        rounds += 1;
        // Individual matrices, group fixed.
        pis = (0..data.num_voters())
            .into_par_iter()
            .map(|voter| {
                let g = &group[attrs.attribute(voter) as usize];
                let f = |pi: &[f64], grad: &mut [f64]| {
                    let mut total = 0.0;
                    for truth in 0..k {
                        let row = &pi[truth * k..(truth + 1) * k];
                        total += dirichlet_log_pdf(row, &alpha[truth], alpha_log_norm[truth]);
                        for l in 0..k {
                            grad[truth * k + l] = (alpha[truth][l] - 1.0) / row[l].max(PROB_CLIP);
                        }
                    }
                    total
                        + soft_likelihood_term(
                            pi,
                            g,
                            Some(grad),
                            voter,
                            &weighted,
                            &z,
                            k,
                        )
                };
                maximize_on_simplex_rows(f, &pis[voter], k, &opts.inner).map(|out| out.point)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;

        // Group matrices, individuals fixed. No prior term: the posterior
        // places Dirichlet priors on individual rows and soft labels only.
        if opts.update_group {
            for a in 0..2usize {
                let members = attrs.voters_with(a as u8);
                if members.is_empty() {
                    continue;
                }
                let f = |g: &[f64], grad: &mut [f64]| {
                    grad.fill(0.0);
                    let mut total = 0.0;
                    for &voter in &members {
                        total += soft_likelihood_term(
                            &pis[voter],
                            g,
                            Some(grad),
                            voter,
                            &weighted,
                            &z,
                            k,
                        );
                    }
                    total
                };
                group[a] =
                    maximize_on_simplex_rows(f, &group[a], k, &opts.inner).map(|out| out.point)?;
            }
        }

        // Soft labels, confusions fixed.
        let effective: Vec<Vec<f64>> = (0..data.num_voters())
            .map(|voter| effective_flat(&pis[voter], &group[attrs.attribute(voter) as usize]))
            .collect();
        z = (0..data.num_tasks())
            .into_par_iter()
            .map(|task| {
                let f = |zr: &[f64], grad: &mut [f64]| {
                    task_objective(zr, grad, task, &weighted, &effective, hyper.rho(), rho_log_norm, k)
                };
                maximize_on_simplex_rows(f, &z[task], k, &opts.inner).map(|out| out.point)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;

        let value = objective(&pis, &group, &z);
        let prev = *trace.last().expect("non-empty");
        trace.push(value);
        if (value - prev).abs() <= opts.tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let soft_labels = match opts.output {
        GroupAnnoOutput::Direct => SoftLabels::new(z.clone())?,
        GroupAnnoOutput::GroupReweighted => {
            let reweighted = sample_weights(data, attrs)?;
            let group_only: Vec<Vec<f64>> = (0..data.num_voters())
                .map(|voter| group[attrs.attribute(voter) as usize].clone())
                .collect();
            let rows = (0..data.num_tasks())
                .into_par_iter()
                .map(|task| {
                    let f = |zr: &[f64], grad: &mut [f64]| {
                        task_objective(
                            zr,
                            grad,
                            task,
                            &reweighted,
                            &group_only,
                            hyper.rho(),
                            rho_log_norm,
                            k,
                        )
                    };
                    maximize_on_simplex_rows(f, &z[task], k, &opts.inner).map(|out| out.point)
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            SoftLabels::new(rows)?
        }
    };

    let state = build_state(pis, group, attrs, k)?;
    Ok(GroupAnnoFitResult {
        soft_labels,
        state,
        objective_trace: trace,
        rounds,
        converged,
    })
}

/// Per-task soft-label objective under fixed effective confusions.
#[allow(clippy::too_many_arguments)]
fn task_objective(
    z: &[f64],
    grad: &mut [f64],
    task: usize,
    data: &WeightedLabels,
    confusions: &[Vec<f64>],
    rho: &[f64],
    rho_log_norm: f64,
    k: usize,
) -> f64 {
    let mut total = dirichlet_log_pdf(z, rho, rho_log_norm);
    for truth in 0..k {
        grad[truth] = (rho[truth] - 1.0) / z[truth].max(PROB_CLIP);
    }
    for (voter, class, w) in data.task_labels(task) {
        let pi = &confusions[voter];
        let mut p = 0.0;
        for truth in 0..k {
            p += pi[truth * k + class] * z[truth];
        }
        let p = p.max(PROB_CLIP);
        total += w * p.ln();
        for truth in 0..k {
            grad[truth] += w * pi[truth * k + class] / p;
        }
    }
    total
}

fn groupanno_ds(
    data: &LabelMatrix,
    attrs: &AttributeTable,
    hyper: &DirichletHyper,
    opts: &GroupAnnoOptions,
) -> Result<GroupAnnoFitResult> {
    let k = data.num_classes();
    let weighted = WeightedLabels::unit(data.clone());
    let mut q = mv_aggregate(&weighted)?;
    let mut pis: Vec<Vec<f64>> = vec![flat(&hyper.alpha_mean()); data.num_voters()];
    let mut group: [Vec<f64>; 2] = match &opts.init_group {
        Some([g0, g1]) => [flat(g0), flat(g1)],
        None => [
            flat(&ConfusionMatrix::uniform(k)),
            flat(&ConfusionMatrix::uniform(k)),
        ],
    };
    let mut prior = vec![1.0 / k as f64; k];

    let effective_state = |pis: &[Vec<f64>], group: &[Vec<f64>; 2], prior: &[f64], q: &SoftLabels| -> Result<DsModelState> {
        let confusions = (0..data.num_voters())
            .map(|voter| {
                unflat(
                    effective_flat(&pis[voter], &group[attrs.attribute(voter) as usize]),
                    k,
                )
            })
            .collect::<Result<Vec<ConfusionMatrix>>>()?;
        Ok(DsModelState {
            confusions,
            prior: prior.to_vec(),
            posteriors: q.clone(),
        })
    };

    let mut trace = Vec::new();
    let mut rounds = 0;
    let mut converged = false;
    for _ in 0..opts.max_rounds {
        rounds += 1;
        // Weighted per-class label mass for each voter: c[truth][class].
        let counts: Vec<Vec<f64>> = (0..data.num_voters())
            .into_par_iter()
            .map(|voter| {
                let mut c = vec![0.0; k * k];
                for (task, class, w) in weighted.voter_labels(voter) {
                    let posterior = q.row(task);
                    for truth in 0..k {
                        c[truth * k + class] += w * posterior[truth];
                    }
                }
                c
            })
            .collect();

        prior = {
            let mut p = vec![0.0; k];
            for row in q.rows() {
                for (slot, &v) in p.iter_mut().zip(row) {
                    *slot += v;
                }
            }
            p.iter().map(|v| v / q.num_tasks() as f64).collect()
        };

        // Individual rows decouple under the lower bound; solve each row.
        pis = (0..data.num_voters())
            .into_par_iter()
            .map(|voter| {
                let g = &group[attrs.attribute(voter) as usize];
                let mut new_pi = pis[voter].clone();
                for truth in 0..k {
                    let c_row = &counts[voter][truth * k..(truth + 1) * k];
                    let g_row = &g[truth * k..(truth + 1) * k];
                    let f = |row: &[f64], grad: &mut [f64]| {
                        let mut total = 0.0;
                        for l in 0..k {
                            let eff = (0.5 * (row[l] + g_row[l])).max(PROB_CLIP);
                            total += c_row[l] * eff.ln();
                            grad[l] = c_row[l] * 0.5 / eff;
                        }
                        total
                    };
                    let out = maximize_on_simplex_rows(
                        f,
                        &pis[voter][truth * k..(truth + 1) * k],
                        k,
                        &opts.inner,
                    )?;
                    new_pi[truth * k..(truth + 1) * k].copy_from_slice(&out.point);
                }
                Ok(new_pi)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;

        // Group rows likewise decouple given the individuals.
        if opts.update_group {
            for a in 0..2usize {
                let members = attrs.voters_with(a as u8);
                if members.is_empty() {
                    continue;
                }
                for truth in 0..k {
                    let f = |row: &[f64], grad: &mut [f64]| {
                        grad.fill(0.0);
                        let mut total = 0.0;
                        for &voter in &members {
                            let c_row = &counts[voter][truth * k..(truth + 1) * k];
                            let pi_row = &pis[voter][truth * k..(truth + 1) * k];
                            for l in 0..k {
                                let eff = (0.5 * (pi_row[l] + row[l])).max(PROB_CLIP);
                                total += c_row[l] * eff.ln();
                                grad[l] += c_row[l] * 0.5 / eff;
                            }
                        }
                        total
                    };
                    let out = maximize_on_simplex_rows(
                        f,
                        &group[a][truth * k..(truth + 1) * k],
                        k,
                        &opts.inner,
                    )?;
                    group[a][truth * k..(truth + 1) * k].copy_from_slice(&out.point);
                }
            }
        }

        let state = effective_state(&pis, &group, &prior, &q)?;
        let q_next = ds_e_step(&state, &weighted)?;
        let mut traced = state;
        traced.posteriors = q_next.clone();
        trace.push(ds_lower_bound(&traced, &weighted));
        let delta = q
            .rows()
            .zip(q_next.rows())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        q = q_next;
        if delta <= opts.tol {
            converged = true;
            break;
        }
    }

    let soft_labels = match opts.output {
        GroupAnnoOutput::Direct => q.clone(),
        GroupAnnoOutput::GroupReweighted => {
            let reweighted = sample_weights(data, attrs)?;
            let confusions = (0..data.num_voters())
                .map(|voter| unflat(group[attrs.attribute(voter) as usize].clone(), k))
                .collect::<Result<Vec<ConfusionMatrix>>>()?;
            let state = DsModelState {
                confusions,
                prior: prior.clone(),
                posteriors: q.clone(),
            };
            ds_e_step(&state, &reweighted)?
        }
    };

    let state = build_state(pis, group, attrs, k)?;
    Ok(GroupAnnoFitResult {
        soft_labels,
        state,
        objective_trace: trace,
        rounds,
        converged,
    })
}

fn build_state(
    pis: Vec<Vec<f64>>,
    group: [Vec<f64>; 2],
    attrs: &AttributeTable,
    k: usize,
) -> Result<GroupAnnoState> {
    let effective = pis
        .iter()
        .enumerate()
        .map(|(voter, pi)| {
            unflat(
                effective_flat(pi, &group[attrs.attribute(voter) as usize]),
                k,
            )
        })
        .collect::<Result<Vec<ConfusionMatrix>>>()?;
    let individual = pis
        .into_iter()
        .map(|pi| unflat(pi, k))
        .collect::<Result<Vec<ConfusionMatrix>>>()?;
    let group = [unflat(group[0].clone(), k)?, unflat(group[1].clone(), k)?];
    Ok(GroupAnnoState {
        individual,
        group,
        effective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn matrix(entries: Vec<(usize, usize, usize)>, i: usize, j: usize, k: usize) -> LabelMatrix {
        LabelMatrix::from_entries(i, j, k, entries).unwrap()
    }

    #[test]
    fn balanced_task_gets_unit_weights() {
        let data = matrix(vec![(0, 0, 0), (1, 0, 1), (2, 0, 0), (3, 0, 1)], 4, 1, 2);
        let attrs = AttributeTable::balanced(vec![0, 0, 1, 1]).unwrap();
        let weighted = sample_weights(&data, &attrs).unwrap();
        for v in 0..4 {
            assert_abs_diff_eq!(weighted.weight(v, 0).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_vs_one_weights() {
        let data = matrix(vec![(0, 0, 0), (1, 0, 0), (2, 0, 1), (3, 0, 1)], 4, 1, 2);
        let attrs = AttributeTable::balanced(vec![0, 0, 0, 1]).unwrap();
        let weighted = sample_weights(&data, &attrs).unwrap();
        for v in 0..3 {
            assert_abs_diff_eq!(weighted.weight(v, 0).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(weighted.weight(3, 0).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn single_attribute_task_gets_unit_weights() {
        let data = matrix(vec![(0, 0, 0), (1, 0, 1)], 2, 1, 2);
        let attrs = AttributeTable::balanced(vec![0, 0]).unwrap();
        let weighted = sample_weights(&data, &attrs).unwrap();
        assert_abs_diff_eq!(weighted.weight(0, 0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(weighted.weight(1, 0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn per_task_weights_sum_to_label_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let num_voters = rng.gen_range(3..10);
            let num_tasks = rng.gen_range(2..6);
            let mut entries = Vec::new();
            for v in 0..num_voters {
                for t in 0..num_tasks {
                    if rng.gen_bool(0.7) || v == 0 {
                        entries.push((v, t, rng.gen_range(0..2)));
                    }
                }
            }
            let data = matrix(entries, num_voters, num_tasks, 2);
            let attributes: Vec<u8> = (0..num_voters).map(|_| rng.gen_range(0..2)).collect();
            let p0: f64 = rng.gen_range(0.1..0.9);
            let attrs = AttributeTable::new(attributes, (p0, 1.0 - p0)).unwrap();
            let weighted = sample_weights(&data, &attrs).unwrap();
            for t in 0..num_tasks {
                let total: f64 = weighted.task_labels(t).map(|(_, _, w)| w).sum();
                let count = data.task_labels(t).len() as f64;
                assert_abs_diff_eq!(total, count, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn split_equal_estimates_pass_through() {
        let data = matrix(vec![(0, 0, 0), (1, 0, 0)], 2, 1, 2);
        let attrs = AttributeTable::balanced(vec![0, 1]).unwrap();
        let (z, warnings) = split_aggregate(&data, &attrs, |m| {
            mv_aggregate(&WeightedLabels::unit(m.clone()))
        })
        .unwrap();
        assert!(warnings.is_empty());
        assert_abs_diff_eq!(z.get(0, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn split_midpoint_of_opposed_groups() {
        let data = matrix(vec![(0, 0, 0), (1, 0, 1)], 2, 1, 2);
        let attrs = AttributeTable::balanced(vec![0, 1]).unwrap();
        let (z, _) = split_aggregate(&data, &attrs, |m| {
            mv_aggregate(&WeightedLabels::unit(m.clone()))
        })
        .unwrap();
        assert_abs_diff_eq!(z.get(0, 0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(z.get(0, 1), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn split_mv_equals_weighted_mv_when_covered() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..10 {
            let num_voters = 6;
            let num_tasks = 4;
            let attributes: Vec<u8> = (0..num_voters).map(|v| u8::from(v >= 2)).collect();
            let mut entries = Vec::new();
            for t in 0..num_tasks {
                // guarantee both groups touch every task
                entries.push((0, t, rng.gen_range(0..2)));
                entries.push((3, t, rng.gen_range(0..2)));
                for v in [1usize, 2, 4, 5] {
                    if rng.gen_bool(0.6) {
                        entries.push((v, t, rng.gen_range(0..2)));
                    }
                }
            }
            let data = matrix(entries, num_voters, num_tasks, 2);
            let p0: f64 = rng.gen_range(0.2..0.8);
            let attrs = AttributeTable::new(attributes, (p0, 1.0 - p0)).unwrap();
            let (split, warnings) = split_aggregate(&data, &attrs, |m| {
                mv_aggregate(&WeightedLabels::unit(m.clone()))
            })
            .unwrap();
            assert!(warnings.is_empty());
            let weighted = weighted_mv(&data, &attrs).unwrap();
            for t in 0..num_tasks {
                for c in 0..2 {
                    assert!((split.get(t, c) - weighted.get(t, c)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn split_falls_back_when_one_group_missing() {
        // task 1 is labeled only by the a=0 voter
        let data = matrix(vec![(0, 0, 0), (1, 0, 1), (0, 1, 0)], 2, 2, 2);
        let attrs = AttributeTable::balanced(vec![0, 1]).unwrap();
        let (z, warnings) = split_aggregate(&data, &attrs, |m| {
            mv_aggregate(&WeightedLabels::unit(m.clone()))
        })
        .unwrap();
        assert_eq!(
            warnings,
            vec![SplitWarning {
                task: 1,
                missing_attr: 1
            }]
        );
        assert_abs_diff_eq!(z.get(1, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn combine_is_idempotent_on_equal_inputs() {
        let m = ConfusionMatrix::new(vec![vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        let combined = groupanno_combine(&m, &m).unwrap();
        assert_eq!(combined, m);
    }

    #[test]
    fn combine_identity_and_uniform() {
        let combined =
            groupanno_combine(&ConfusionMatrix::identity(2), &ConfusionMatrix::uniform(2)).unwrap();
        assert_abs_diff_eq!(combined.get(0, 0), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(combined.get(0, 1), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(combined.get(1, 0), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(combined.get(1, 1), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn combine_preserves_row_stochasticity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            let c: f64 = rng.gen_range(0.0..1.0);
            let d: f64 = rng.gen_range(0.0..1.0);
            let m1 = ConfusionMatrix::new(vec![vec![a, 1.0 - a], vec![b, 1.0 - b]]).unwrap();
            let m2 = ConfusionMatrix::new(vec![vec![c, 1.0 - c], vec![d, 1.0 - d]]).unwrap();
            // the constructor revalidates row sums
            groupanno_combine(&m1, &m2).unwrap();
        }
    }

    #[test]
    fn groupanno_traces_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut entries = Vec::new();
        for v in 0..6 {
            for t in 0..8 {
                entries.push((v, t, rng.gen_range(0..2)));
            }
        }
        let data = matrix(entries, 6, 8, 2);
        let attrs = AttributeTable::balanced(vec![0, 0, 0, 1, 1, 1]).unwrap();
        let hyper = DirichletHyper::flat(2);
        for base in [GroupAnnoBase::SoftDs, GroupAnnoBase::Ds] {
            let fit =
                groupanno_fit(&data, &attrs, base, &hyper, &GroupAnnoOptions::default()).unwrap();
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "objective decreased ({base:?}): {w:?}");
            }
            // effective matrices stay row-stochastic (constructor validates)
            assert_eq!(fit.state.effective.len(), 6);
        }
    }
}
