//! Opinion aggregation models: majority voting, the Dawid-Skene latent-class
//! model fit by EM, and the Soft Dawid-Skene model fit by alternating MAP
//! maximization under Dirichlet priors.
//!
//! All three consume [`WeightedLabels`] and produce row-stochastic
//! [`SoftLabels`]. Per-label weights multiply each label's log-likelihood
//! contribution (fractional label counts); with unit weights the models
//! reduce to their textbook forms.

use std::collections::HashMap;

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::data::{ConfusionMatrix, DirichletHyper, LabelMatrix, SoftLabels};
use crate::error::{Error, Result};
use crate::simplex::{maximize_on_simplex_rows, SolverOptions};

/// Probabilities are clipped to this floor inside logs and divisions, which
/// keeps flat-prior objectives finite on the simplex boundary.
pub const PROB_CLIP: f64 = 1e-12;

/// A label matrix with a positive weight per observed label, defaulting to 1.
#[derive(Debug, Clone)]
pub struct WeightedLabels {
    base: LabelMatrix,
    w_by_voter: Vec<Vec<f64>>,
    w_by_task: Vec<Vec<f64>>,
}

impl WeightedLabels {
    /// Unit weight for every observed label.
    pub fn unit(base: LabelMatrix) -> Self {
        let w_by_voter = (0..base.num_voters())
            .map(|i| vec![1.0; base.voter_labels(i).len()])
            .collect();
        let w_by_task = (0..base.num_tasks())
            .map(|j| vec![1.0; base.task_labels(j).len()])
            .collect();
        WeightedLabels {
            base,
            w_by_voter,
            w_by_task,
        }
    }

    /// Weights from a sparse `(voter, task) -> w` map; absent pairs get 1.
    pub fn with_weights(base: LabelMatrix, weights: &HashMap<(usize, usize), f64>) -> Result<Self> {
        for (&(voter, task), &w) in weights {
            if voter >= base.num_voters()
                || task >= base.num_tasks()
                || base.get(voter, task).is_none()
            {
                return Err(Error::Validation(format!(
                    "weight given for unobserved pair (voter {voter}, task {task})"
                )));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Validation(format!(
                    "weight {w} for (voter {voter}, task {task}) must be positive"
                )));
            }
        }
        let mut out = WeightedLabels::unit(base);
        for i in 0..out.base.num_voters() {
            for (slot, &(task, _)) in out.w_by_voter[i]
                .iter_mut()
                .zip(out.base.voter_labels(i))
            {
                if let Some(&w) = weights.get(&(i, task)) {
                    *slot = w;
                }
            }
        }
        for j in 0..out.base.num_tasks() {
            for (slot, &(voter, _)) in out.w_by_task[j].iter_mut().zip(out.base.task_labels(j)) {
                if let Some(&w) = weights.get(&(voter, j)) {
                    *slot = w;
                }
            }
        }
        Ok(out)
    }

    pub fn matrix(&self) -> &LabelMatrix {
        &self.base
    }

    pub fn num_voters(&self) -> usize {
        self.base.num_voters()
    }

    pub fn num_tasks(&self) -> usize {
        self.base.num_tasks()
    }

    pub fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    /// `(voter, class, weight)` triples observed on one task.
    pub fn task_labels(&self, task: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.base
            .task_labels(task)
            .iter()
            .zip(&self.w_by_task[task])
            .map(|(&(voter, class), &w)| (voter, class, w))
    }

    /// `(task, class, weight)` triples given by one voter.
    pub fn voter_labels(&self, voter: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.base
            .voter_labels(voter)
            .iter()
            .zip(&self.w_by_voter[voter])
            .map(|(&(task, class), &w)| (task, class, w))
    }

    pub fn weight(&self, voter: usize, task: usize) -> Option<f64> {
        let labels = self.base.voter_labels(voter);
        labels
            .binary_search_by_key(&task, |&(t, _)| t)
            .ok()
            .map(|idx| self.w_by_voter[voter][idx])
    }
}

/// Fitted state shared by D&S and Soft D&S: per-voter confusion matrices, a
/// class prior (learned in D&S, the normalized hyperparameter in Soft D&S),
/// and per-task posteriors/soft labels.
#[derive(Debug, Clone)]
pub struct DsModelState {
    pub confusions: Vec<ConfusionMatrix>,
    pub prior: Vec<f64>,
    pub posteriors: SoftLabels,
}

/// Weighted majority voting: per task, each class's share of total weight.
pub fn mv_aggregate(data: &WeightedLabels) -> Result<SoftLabels> {
    let k = data.num_classes();
    let mut rows = Vec::with_capacity(data.num_tasks());
    for task in 0..data.num_tasks() {
        let mut acc = vec![0.0; k];
        let mut total = 0.0;
        for (_, class, w) in data.task_labels(task) {
            acc[class] += w;
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::Validation(format!(
                "task {task} has no observed labels"
            )));
        }
        for a in acc.iter_mut() {
            *a /= total;
        }
        rows.push(acc);
    }
    SoftLabels::new(rows)
}

/// E-step of the D&S model: posterior class probabilities per task given the
/// current confusion matrices and prior, computed in log space.
pub fn ds_e_step(state: &DsModelState, data: &WeightedLabels) -> Result<SoftLabels> {
    let k = data.num_classes();
    let log_prior: Vec<f64> = state.prior.iter().map(|&p| p.ln()).collect();
    let rows = (0..data.num_tasks())
        .into_par_iter()
        .map(|task| {
            let mut log_u = log_prior.clone();
            for (voter, class, w) in data.task_labels(task) {
                let pi = &state.confusions[voter];
                for (truth, slot) in log_u.iter_mut().enumerate() {
                    *slot += w * pi.get(truth, class).ln();
                }
            }
            let max = log_u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numerical(format!(
                    "task {task}: posterior mass underflowed to zero for every class"
                )));
            }
            let mut row: Vec<f64> = log_u.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
            Ok(row)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    debug_assert!(rows.iter().all(|r| r.len() == k));
    SoftLabels::new(rows)
}

/// M-step of the D&S model: closed-form maximizers of the lower bound given
/// posteriors `q`. Confusion rows with zero effective mass become uniform.
pub fn ds_m_step(q: &SoftLabels, data: &WeightedLabels) -> Result<DsModelState> {
    let k = data.num_classes();
    if q.num_tasks() != data.num_tasks() || q.num_classes() != k {
        return Err(Error::Validation(format!(
            "posterior shape {}x{} does not match data {}x{}",
            q.num_tasks(),
            q.num_classes(),
            data.num_tasks(),
            k
        )));
    }
    let mut prior = vec![0.0; k];
    for row in q.rows() {
        for (slot, &v) in prior.iter_mut().zip(row) {
            *slot += v;
        }
    }
    for slot in prior.iter_mut() {
        *slot /= q.num_tasks() as f64;
    }

    let confusions = (0..data.num_voters())
        .into_par_iter()
        .map(|voter| {
            let mut numer = vec![vec![0.0; k]; k];
            let mut denom = vec![0.0; k];
            for (task, class, w) in data.voter_labels(voter) {
                let posterior = q.row(task);
                for truth in 0..k {
                    let mass = w * posterior[truth];
                    numer[truth][class] += mass;
                    denom[truth] += mass;
                }
            }
            let rows: Vec<Vec<f64>> = numer
                .into_iter()
                .zip(&denom)
                .map(|(row, &d)| {
                    if d == 0.0 {
                        vec![1.0 / k as f64; k]
                    } else {
                        row.into_iter().map(|v| v / d).collect()
                    }
                })
                .collect();
            ConfusionMatrix::new(rows)
        })
        .collect::<Result<Vec<ConfusionMatrix>>>()?;

    Ok(DsModelState {
        confusions,
        prior,
        posteriors: q.clone(),
    })
}

/// Evidence lower bound of the D&S model at the given state (weighted form).
/// Terms with zero posterior mass contribute nothing.
pub fn ds_lower_bound(state: &DsModelState, data: &WeightedLabels) -> f64 {
    let k = data.num_classes();
    let per_task: Vec<f64> = (0..data.num_tasks())
        .into_par_iter()
        .map(|task| {
            let posterior = state.posteriors.row(task);
            let mut log_lik = vec![0.0; k];
            for (voter, class, w) in data.task_labels(task) {
                let pi = &state.confusions[voter];
                for (truth, slot) in log_lik.iter_mut().enumerate() {
                    *slot += w * pi.get(truth, class).ln();
                }
            }
            let mut total = 0.0;
            for truth in 0..k {
                let q = posterior[truth];
                if q > 0.0 {
                    total += q * (state.prior[truth].ln() - q.ln() + log_lik[truth]);
                }
            }
            total
        })
        .collect();
    per_task.iter().sum()
}

/// Settings for the D&S EM loop.
#[derive(Debug, Clone)]
pub struct DsOptions {
    /// Stop when the largest absolute change in any posterior entry falls
    /// below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DsOptions {
    fn default() -> Self {
        DsOptions {
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DsFitResult {
    pub state: DsModelState,
    /// Lower bound after each full EM iteration; non-decreasing.
    pub lower_bound_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits the D&S model by EM. Posteriors are initialized from `init` or, by
/// default, majority voting.
pub fn ds_fit(data: &WeightedLabels, init: Option<SoftLabels>, opts: &DsOptions) -> Result<DsFitResult> {
    let mut q = match init {
        Some(q) => q,
        None => mv_aggregate(data)?,
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let state = ds_m_step(&q, data)?;
        let q_next = ds_e_step(&state, data)?;
        iterations += 1;
        let mut state = state;
        state.posteriors = q_next.clone();
        trace.push(ds_lower_bound(&state, data));
        let delta = max_abs_diff(&q, &q_next);
        q = q_next;
        if delta <= opts.tol {
            converged = true;
            let result = DsFitResult {
                state,
                lower_bound_trace: trace,
                iterations,
                converged,
            };
            return Ok(result);
        }
        if iterations == opts.max_iter {
            return Ok(DsFitResult {
                state,
                lower_bound_trace: trace,
                iterations,
                converged,
            });
        }
    }
    // max_iter == 0: return the initial posteriors with an M-step state.
    let state = ds_m_step(&q, data)?;
    Ok(DsFitResult {
        state,
        lower_bound_trace: trace,
        iterations,
        converged,
    })
}

fn max_abs_diff(a: &SoftLabels, b: &SoftLabels) -> f64 {
    a.rows()
        .zip(b.rows())
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
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

/// Per-voter term of the Soft D&S posterior: Dirichlet prior on the voter's
/// confusion rows plus that voter's label log-likelihood. Fills `grad` when
/// given. `pi` is the voter's K-by-K matrix, row-major.
#[allow(clippy::too_many_arguments)]
fn voter_term(
    pi: &[f64],
    mut grad: Option<&mut [f64]>,
    voter: usize,
    data: &WeightedLabels,
    z: &[Vec<f64>],
    alpha: &[Vec<f64>],
    alpha_log_norm: &[f64],
    k: usize,
) -> f64 {
    let mut total = 0.0;
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    for truth in 0..k {
        let row = &pi[truth * k..(truth + 1) * k];
        total += dirichlet_log_pdf(row, &alpha[truth], alpha_log_norm[truth]);
        if let Some(g) = grad.as_deref_mut() {
            for l in 0..k {
                g[truth * k + l] = (alpha[truth][l] - 1.0) / row[l].max(PROB_CLIP);
            }
        }
    }
    for (task, class, w) in data.voter_labels(voter) {
        let zr = &z[task];
        let mut p = 0.0;
        for truth in 0..k {
            p += pi[truth * k + class] * zr[truth];
        }
        let p = p.max(PROB_CLIP);
        total += w * p.ln();
        if let Some(g) = grad.as_deref_mut() {
            for truth in 0..k {
                g[truth * k + class] += w * zr[truth] / p;
            }
        }
    }
    total
}

/// Per-task term of the Soft D&S posterior owned by the Z-update: Dirichlet
/// prior on the task's soft label plus the label log-likelihood of that task.
#[allow(clippy::too_many_arguments)]
fn task_term(
    z: &[f64],
    mut grad: Option<&mut [f64]>,
    task: usize,
    data: &WeightedLabels,
    confusions: &[Vec<f64>],
    rho: &[f64],
    rho_log_norm: f64,
    k: usize,
) -> f64 {
    let mut total = dirichlet_log_pdf(z, rho, rho_log_norm);
    if let Some(g) = grad.as_deref_mut() {
        for truth in 0..k {
            g[truth] = (rho[truth] - 1.0) / z[truth].max(PROB_CLIP);
        }
    }
    for (voter, class, w) in data.task_labels(task) {
        let pi = &confusions[voter];
        let mut p = 0.0;
        for truth in 0..k {
            p += pi[truth * k + class] * z[truth];
        }
        let p = p.max(PROB_CLIP);
        total += w * p.ln();
        if let Some(g) = grad.as_deref_mut() {
            for truth in 0..k {
                g[truth] += w * pi[truth * k + class] / p;
            }
        }
    }
    total
}

fn posterior_value(
    data: &WeightedLabels,
    confusions: &[Vec<f64>],
    z: &[Vec<f64>],
    hyper: &DirichletHyper,
    k: usize,
) -> f64 {
    let alpha: Vec<Vec<f64>> = (0..k).map(|t| hyper.alpha_row(t).to_vec()).collect();
    let alpha_log_norm: Vec<f64> = alpha.iter().map(|row| dirichlet_log_norm(row)).collect();
    let rho_log_norm = dirichlet_log_norm(hyper.rho());
    let per_voter: Vec<f64> = (0..data.num_voters())
        .into_par_iter()
        .map(|voter| {
            voter_term(
                &confusions[voter],
                None,
                voter,
                data,
                z,
                &alpha,
                &alpha_log_norm,
                k,
            )
        })
        .collect();
    let mut total: f64 = per_voter.iter().sum();
    for zr in z {
        total += dirichlet_log_pdf(zr, hyper.rho(), rho_log_norm);
    }
    total
}

/// Log posterior of the Soft D&S model at the given state: Dirichlet prior
/// terms for every confusion row and every soft label, plus the weighted
/// label log-likelihood. Probabilities are clipped at [`PROB_CLIP`].
pub fn log_posterior(state: &DsModelState, data: &WeightedLabels, hyper: &DirichletHyper) -> Result<f64> {
    let k = data.num_classes();
    if hyper.num_classes() != k || state.posteriors.num_tasks() != data.num_tasks() {
        return Err(Error::Validation(
            "state/hyper dimensions do not match the data".into(),
        ));
    }
    let confusions: Vec<Vec<f64>> = state
        .confusions
        .iter()
        .map(|c| c.rows().iter().flatten().cloned().collect())
        .collect();
    let z: Vec<Vec<f64>> = state.posteriors.rows().map(|r| r.to_vec()).collect();
    Ok(posterior_value(data, &confusions, &z, hyper, k))
}

/// Settings for the Soft D&S alternating MAP loop.
#[derive(Debug, Clone)]
pub struct SoftDsOptions {
    /// Relative log-posterior improvement below which the fit stops.
    pub tol: f64,
    pub max_rounds: usize,
    /// Settings for every inner simplex solve.
    pub inner: SolverOptions,
    /// When false the confusion matrices are held fixed and only the soft
    /// labels are optimized.
    pub optimize_confusions: bool,
    /// Confusion initialization; defaults to the prior mean of `alpha`.
    pub init_confusions: Option<Vec<ConfusionMatrix>>,
    /// Soft-label initialization; defaults to majority voting.
    pub init_soft: Option<SoftLabels>,
}

impl Default for SoftDsOptions {
    fn default() -> Self {
        SoftDsOptions {
            tol: 1e-6,
            max_rounds: 100,
            inner: SolverOptions::default(),
            optimize_confusions: true,
            init_confusions: None,
            init_soft: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SoftDsFitResult {
    pub state: DsModelState,
    /// Log posterior at initialization and after each outer round;
    /// non-decreasing.
    pub posterior_trace: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
}

/// Fits the Soft D&S model: soft labels start at the majority vote, then
/// alternating rounds maximize the log posterior over every voter's confusion
/// matrix (rows jointly) and every task's soft label via projected gradient
/// ascent. The prior `rho` stays fixed as a hyperparameter.
pub fn soft_ds_fit(data: &WeightedLabels, hyper: &DirichletHyper, opts: &SoftDsOptions) -> Result<SoftDsFitResult> {
    let k = data.num_classes();
    if hyper.num_classes() != k {
        return Err(Error::Validation(format!(
            "hyperparameters are for {} classes but data has {k}",
            hyper.num_classes()
        )));
    }

    let init_soft = match &opts.init_soft {
        Some(z) => z.clone(),
        None => mv_aggregate(data)?,
    };
    if init_soft.num_tasks() != data.num_tasks() || init_soft.num_classes() != k {
        return Err(Error::Validation("initial soft labels have wrong shape".into()));
    }
    let mut z: Vec<Vec<f64>> = init_soft.rows().map(|r| r.to_vec()).collect();

    let init_conf = match &opts.init_confusions {
        Some(c) => {
            if c.len() != data.num_voters() || c.iter().any(|m| m.num_classes() != k) {
                return Err(Error::Validation(
                    "initial confusion matrices have wrong shape".into(),
                ));
            }
            c.clone()
        }
        None => vec![hyper.alpha_mean(); data.num_voters()],
    };
    let mut confusions: Vec<Vec<f64>> = init_conf
        .iter()
        .map(|c| c.rows().iter().flatten().cloned().collect())
        .collect();

    let alpha: Vec<Vec<f64>> = (0..k).map(|t| hyper.alpha_row(t).to_vec()).collect();
    let alpha_log_norm: Vec<f64> = alpha.iter().map(|row| dirichlet_log_norm(row)).collect();
    let rho_log_norm = dirichlet_log_norm(hyper.rho());

    let mut trace = vec![posterior_value(data, &confusions, &z, hyper, k)];
    let mut converged = false;
    let mut rounds = 0;

    for _ in 0..opts.max_rounds {
        rounds += 1;
        if opts.optimize_confusions {
            confusions = (0..data.num_voters())
                .into_par_iter()
                .map(|voter| {
                    let objective = |pi: &[f64], grad: &mut [f64]| {
                        voter_term(pi, Some(grad), voter, data, &z, &alpha, &alpha_log_norm, k)
                    };
                    maximize_on_simplex_rows(objective, &confusions[voter], k, &opts.inner)
                        .map(|out| out.point)
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
        }
        z = (0..data.num_tasks())
            .into_par_iter()
            .map(|task| {
                let objective = |zr: &[f64], grad: &mut [f64]| {
                    task_term(zr, Some(grad), task, data, &confusions, hyper.rho(), rho_log_norm, k)
                };
                maximize_on_simplex_rows(objective, &z[task], k, &opts.inner).map(|out| out.point)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;

        let value = posterior_value(data, &confusions, &z, hyper, k);
        let prev = *trace.last().expect("trace is non-empty");
        trace.push(value);
        if (value - prev).abs() <= opts.tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let state = DsModelState {
        confusions: confusions
            .into_iter()
            .map(|flat| {
                ConfusionMatrix::new(flat.chunks_exact(k).map(|r| r.to_vec()).collect())
            })
            .collect::<Result<Vec<ConfusionMatrix>>>()?,
        prior: hyper.rho_mean(),
        posteriors: SoftLabels::new(z)?,
    };
    Ok(SoftDsFitResult {
        state,
        posterior_trace: trace,
        rounds,
        converged,
    })
}
