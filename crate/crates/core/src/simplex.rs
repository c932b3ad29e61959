//! Maximization of smooth objectives over probability simplices.
//!
//! The solver is projected gradient ascent with Armijo backtracking. It
//! operates on a flat parameter vector interpreted as one or more rows of
//! equal length, each constrained to its own probability simplex; every
//! iterate is feasible by construction and the objective never decreases.

use crate::error::{Error, Result};

/// A point on the probability simplex: non-negative coordinates summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint {
    coords: Vec<f64>,
}

impl SimplexPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::Validation(
                "simplex point needs at least two coordinates".into(),
            ));
        }
        let mut sum = 0.0;
        for &c in &coords {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Validation(format!(
                    "simplex coordinate {c} is negative or non-finite"
                )));
            }
            sum += c;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "simplex coordinates sum to {sum}, expected 1"
            )));
        }
        Ok(SimplexPoint { coords })
    }

    pub fn uniform(len: usize) -> Self {
        SimplexPoint {
            coords: vec![1.0 / len as f64; len],
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

/// Euclidean projection of an arbitrary finite vector onto the simplex.
pub fn project_simplex(v: &[f64]) -> Result<SimplexPoint> {
    if v.len() < 2 {
        return Err(Error::Domain(
            "projection needs at least two coordinates".into(),
        ));
    }
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("cannot project non-finite vector".into()));
    }
    let mut out = vec![0.0; v.len()];
    project_row(v, &mut out);
    Ok(SimplexPoint { coords: out })
}

/// Sort-based simplex projection (Held/Wolfe/Crowder scheme).
fn project_row(v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(v.len(), out.len());
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite values"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (idx, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (idx + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    for (o, &c) in out.iter_mut().zip(v) {
        *o = (c - theta).max(0.0);
    }
}

fn project_rows(v: &[f64], row_len: usize, out: &mut [f64]) {
    for (chunk_v, chunk_o) in v.chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
        project_row(chunk_v, chunk_o);
    }
}

/// Solver settings. Defaults: tol 1e-6, 200 iterations, Armijo slope 1e-4,
/// step shrink 0.5 from an initial step of 1.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub armijo_slope: f64,
    pub shrink: f64,
    pub initial_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            max_iter: 200,
            armijo_slope: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
        }
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Projected-gradient infinity norm fell below `tol`.
    Converged,
    /// Iteration budget exhausted.
    MaxIterReached,
    /// No ascent step exists at machine precision (typically on a face of
    /// the simplex). Not an error; the returned point is feasible and at
    /// least as good as the start.
    BoundaryStall,
}

/// Result of a simplex solve: the final feasible point, its objective value,
/// and how the solver stopped.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub point: Vec<f64>,
    pub value: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Maximizes `objective` over a single probability simplex.
///
/// The closure receives the current point and must fill the gradient slice,
/// returning the objective value. Both must be finite on the interior.
pub fn maximize_on_simplex<F>(
    mut objective: F,
    start: &SimplexPoint,
    opts: &SolverOptions,
) -> Result<SolveOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    maximize_on_simplex_rows(&mut objective, start.coords(), start.coords().len(), opts)
}

/// Maximizes `objective` over a product of probability simplices.
///
/// `start` is a flat row-major vector of `start.len() / row_len` rows; each
/// row is independently constrained to the simplex. Used for confusion
/// matrices, where all K rows move jointly under one objective.
pub fn maximize_on_simplex_rows<F>(
    mut objective: F,
    start: &[f64],
    row_len: usize,
    opts: &SolverOptions,
) -> Result<SolveOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if row_len < 2 || start.is_empty() || !start.len().is_multiple_of(row_len) {
        return Err(Error::Domain(format!(
            "start of length {} is not a multiple of row length {row_len}",
            start.len()
        )));
    }
    let n = start.len();
    let mut x = vec![0.0; n];
    project_rows(start, row_len, &mut x);

    let mut grad = vec![0.0; n];
    let mut value = objective(&x, &mut grad);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Domain(
            "objective or gradient non-finite at the starting point".into(),
        ));
    }

    let mut candidate = vec![0.0; n];
    let mut cand_grad = vec![0.0; n];
    let mut trial = vec![0.0; n];

    for iteration in 0..opts.max_iter {
        // Unit-step projected gradient; its norm is the stationarity measure.
        for i in 0..n {
            trial[i] = x[i] + grad[i];
        }
        project_rows(&trial, row_len, &mut candidate);
        let pg_norm = candidate
            .iter()
            .zip(&x)
            .map(|(c, xi)| (c - xi).abs())
            .fold(0.0_f64, f64::max);
        if pg_norm <= opts.tol {
            return Ok(SolveOutcome {
                point: x,
                value,
                status: SolveStatus::Converged,
                iterations: iteration,
            });
        }

        let mut step = opts.initial_step;
        loop {
            for i in 0..n {
                trial[i] = x[i] + step * grad[i];
            }
            project_rows(&trial, row_len, &mut candidate);
            let slope: f64 = grad
                .iter()
                .zip(candidate.iter().zip(&x))
                .map(|(g, (c, xi))| g * (c - xi))
                .sum();
            let moved = candidate.iter().zip(&x).any(|(c, xi)| c != xi);
            if !moved || step < 1e-20 {
                // Projection pins the point: no ascent at machine precision.
                return Ok(SolveOutcome {
                    point: x,
                    value,
                    status: SolveStatus::BoundaryStall,
                    iterations: iteration,
                });
            }
            let cand_value = objective(&candidate, &mut cand_grad);
            if cand_value.is_finite() && cand_value >= value + opts.armijo_slope * slope {
                x.copy_from_slice(&candidate);
                grad.copy_from_slice(&cand_grad);
                value = cand_value;
                break;
            }
            step *= opts.shrink;
        }
    }
    Ok(SolveOutcome {
        point: x,
        value,
        status: SolveStatus::MaxIterReached,
        iterations: opts.max_iter,
    })
}

/// Central finite-difference gradient, step 1e-6. Test and verification aid.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64]) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let h = 1e-6;
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_leaves_feasible_points_alone() {
        let p = project_simplex(&[0.2, 0.8]).unwrap();
        assert_abs_diff_eq!(p.coords()[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(p.coords()[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn projection_hits_vertex() {
        let p = project_simplex(&[2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.coords()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.coords()[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn projection_of_symmetric_vector_is_uniform() {
        let p = project_simplex(&[0.6, 0.6, 0.6]).unwrap();
        for &c in p.coords() {
            assert_abs_diff_eq!(c, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_rejects_non_finite() {
        assert!(project_simplex(&[f64::NAN, 0.5]).is_err());
        assert!(project_simplex(&[f64::INFINITY, 0.5]).is_err());
    }

    #[test]
    fn quadratic_with_interior_optimum() {
        let f = |z: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * (z[0] - 0.3);
            g[1] = -2.0 * (z[1] - 0.7);
            -(z[0] - 0.3).powi(2) - (z[1] - 0.7).powi(2)
        };
        let start = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let out = maximize_on_simplex(f, &start, &SolverOptions::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Converged);
        assert_abs_diff_eq!(out.point[0], 0.3, epsilon = 1e-6);
        assert_abs_diff_eq!(out.point[1], 0.7, epsilon = 1e-6);
    }

    #[test]
    fn linear_objective_reaches_vertex() {
        let f = |z: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            g[1] = 0.0;
            z[0]
        };
        let start = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let out = maximize_on_simplex(f, &start, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(out.point[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.point[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn non_finite_start_is_domain_error() {
        let f = |_: &[f64], g: &mut [f64]| {
            g.fill(0.0);
            f64::NAN
        };
        let start = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        assert!(maximize_on_simplex(f, &start, &SolverOptions::default()).is_err());
    }

    /// Every point the objective sees must be feasible, and accepted values
    /// must never decrease.
    #[test]
    fn iterates_stay_feasible_and_monotone() {
        let mut seen = Vec::new();
        let f = |z: &[f64], g: &mut [f64]| {
            seen.push(z.to_vec());
            g[0] = -2.0 * (z[0] - 0.9);
            g[1] = -2.0 * (z[1] - 0.4);
            g[2] = -2.0 * (z[2] - 0.1);
            -(z[0] - 0.9).powi(2) - (z[1] - 0.4).powi(2) - (z[2] - 0.1).powi(2)
        };
        let start = SimplexPoint::uniform(3);
        let out = maximize_on_simplex(f, &start, &SolverOptions::default()).unwrap();
        assert!(out.value >= -(1.0f64 / 3.0 - 0.9).powi(2) - (1.0f64 / 3.0 - 0.4).powi(2) - (1.0f64 / 3.0 - 0.1).powi(2));
        for point in &seen {
            let sum: f64 = point.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(point.iter().all(|&c| c >= 0.0));
        }
    }

    /// A Soft D&S per-task objective on a 2-voter instance, checked against a
    /// 1e-3-grid scan of the 2-class simplex.
    #[test]
    fn per_task_posterior_matches_grid_scan() {
        // Two voters with fixed confusions, labels (class 0, class 1), and a
        // Dirichlet(2, 2) prior on z.
        let pi = [[[0.8, 0.2], [0.3, 0.7]], [[0.9, 0.1], [0.4, 0.6]]];
        let labels = [0usize, 1usize];
        let rho = [2.0, 2.0];
        let eval = |z: &[f64]| -> f64 {
            let mut total = 0.0;
            for k in 0..2 {
                total += (rho[k] - 1.0) * z[k].max(1e-12).ln();
            }
            for (v, &l) in labels.iter().enumerate() {
                let p: f64 = (0..2).map(|k| pi[v][k][l] * z[k]).sum();
                total += p.max(1e-12).ln();
            }
            total
        };
        let f = |z: &[f64], g: &mut [f64]| {
            for k in 0..2 {
                g[k] = (rho[k] - 1.0) / z[k].max(1e-12);
            }
            for (v, &l) in labels.iter().enumerate() {
                let p: f64 = (0..2).map(|k| pi[v][k][l] * z[k]).sum();
                let p = p.max(1e-12);
                for k in 0..2 {
                    g[k] += pi[v][k][l] / p;
                }
            }
            eval(z)
        };
        let start = SimplexPoint::uniform(2);
        let out = maximize_on_simplex(f, &start, &SolverOptions::default()).unwrap();

        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut t = 0.0;
        while t <= 1.0 + 1e-12 {
            let v = eval(&[t, 1.0 - t]);
            if v > best.0 {
                best = (v, t);
            }
            t += 1e-3;
        }
        assert!(
            (out.point[0] - best.1).abs() <= 2e-3,
            "solver {} vs grid {}",
            out.point[0],
            best.1
        );
    }

    /// Caller-side gradient/finite-difference agreement at random interior
    /// points, relative error <= 1e-4.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pi = [[[0.8, 0.2], [0.3, 0.7]], [[0.9, 0.1], [0.4, 0.6]]];
        let labels = [0usize, 1usize];
        let rho = [2.0, 3.0];
        let eval = |z: &[f64]| -> f64 {
            let mut total = 0.0;
            for k in 0..2 {
                total += (rho[k] - 1.0) * z[k].ln();
            }
            for (v, &l) in labels.iter().enumerate() {
                let p: f64 = (0..2).map(|k| pi[v][k][l] * z[k]).sum();
                total += p.ln();
            }
            total
        };
        for _ in 0..100 {
            let a: f64 = rng.gen_range(0.05..0.95);
            let z = [a, 1.0 - a];
            let mut analytic = [0.0; 2];
            for k in 0..2 {
                analytic[k] = (rho[k] - 1.0) / z[k];
            }
            for (v, &l) in labels.iter().enumerate() {
                let p: f64 = (0..2).map(|k| pi[v][k][l] * z[k]).sum();
                for k in 0..2 {
                    analytic[k] += pi[v][k][l] / p;
                }
            }
            let numeric = finite_difference_gradient(eval, &z);
            for k in 0..2 {
                let rel = (analytic[k] - numeric[k]).abs() / numeric[k].abs().max(1.0);
                assert!(rel <= 1e-4, "rel err {rel} at z = {z:?}");
            }
        }
    }
}
