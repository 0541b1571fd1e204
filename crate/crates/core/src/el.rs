//! Inner empirical-likelihood solver for mean-zero constraints.
//!
//! Given per-subject scores `s_i`, the profile likelihood
//! `max Π p_i` subject to `Σ p_i = 1` and `Σ p_i s_i = 0` is attained at
//! `p_i = 1 / (n (1 + λᵀ s_i))`, where `λ` solves `Σ s_i / (1 + λᵀ s_i) = 0`.
//! The returned statistic is `−2 log(nⁿ Π p_i) = 2 Σ log(1 + λᵀ s_i)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-10;
const DECREMENT_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElSolution {
    /// Lagrange multiplier (length 1 for scalar constraints).
    pub lambda: Vec<f64>,
    pub weights: Vec<f64>,
    /// `−2 log W`; `+∞` when zero is outside the convex hull of the scores.
    pub neg2logw: f64,
    pub hull_ok: bool,
    pub iterations: usize,
}

impl ElSolution {
    fn hull_violation(n: usize, dim: usize) -> Self {
        Self {
            lambda: vec![0.0; dim],
            weights: vec![1.0 / n as f64; n],
            neg2logw: f64::INFINITY,
            hull_ok: false,
            iterations: 0,
        }
    }

    fn centered(n: usize, dim: usize) -> Self {
        Self {
            lambda: vec![0.0; dim],
            weights: vec![1.0 / n as f64; n],
            neg2logw: 0.0,
            hull_ok: true,
            iterations: 0,
        }
    }
}

fn estimating_function(z: &[f64], lambda: f64) -> (f64, f64) {
    let mut g = 0.0;
    let mut dg = 0.0;
    for &zi in z {
        let denom = 1.0 + lambda * zi;
        g += zi / denom;
        dg -= zi * zi / (denom * denom);
    }
    (g, dg)
}

fn weights_from(denoms: impl Iterator<Item = f64>, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = denoms.map(|d| 1.0 / (n as f64 * d)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Scalar dual solve by safeguarded Newton iteration with a bisection fallback,
/// restricted to the domain `1 + λ Z_i ≥ 1/n`.
pub fn solve_scalar_el(z: &[f64]) -> Result<ElSolution> {
    let n = z.len();
    if n < 2 {
        return Err(Error::InvalidInput("empirical likelihood needs at least two scores".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = z.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 && min == 0.0 {
        return Ok(ElSolution::centered(n, 1));
    }
    if !(min < 0.0 && max > 0.0) {
        return Ok(ElSolution::hull_violation(n, 1));
    }
    let floor = 1.0 / n as f64;
    let mut lo = (floor - 1.0) / max;
    let mut hi = (floor - 1.0) / min;
    let scale: f64 = z.iter().map(|v| v.abs()).sum();
    let tol = TOL * scale;
    let mut lambda = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITER {
        iterations += 1;
        let (g, dg) = estimating_function(z, lambda);
        if g.abs() < tol {
            converged = true;
            break;
        }
        // g is strictly decreasing in λ.
        if g > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        let newton = lambda - g / dg;
        lambda = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    if !converged {
        let (g, _) = estimating_function(z, lambda);
        if g.abs() >= tol {
            return Err(Error::NotConverged(format!("scalar EL dual: |g| = {g:e} after {MAX_ITER} iterations")));
        }
    }
    let neg2logw = 2.0 * z.iter().map(|&zi| (1.0 + lambda * zi).ln()).sum::<f64>();
    let weights = weights_from(z.iter().map(|&zi| 1.0 + lambda * zi), n);
    Ok(ElSolution { lambda: vec![lambda], weights, neg2logw: neg2logw.max(0.0), hull_ok: true, iterations })
}

/// Owen's pseudo-logarithm: `log x` above `eps`, its second-order Taylor
/// extension below. Returns the value and first two derivatives.
fn pseudo_log(x: f64, eps: f64) -> (f64, f64, f64) {
    if x >= eps {
        (x.ln(), 1.0 / x, -1.0 / (x * x))
    } else {
        let r = x / eps;
        (eps.ln() - 1.5 + 2.0 * r - 0.5 * r * r, (2.0 - r) / eps, -1.0 / (eps * eps))
    }
}

fn dual_objective(scores: &DMatrix<f64>, lambda: &DVector<f64>, eps: f64) -> f64 {
    let arg = scores * lambda;
    -arg.iter().map(|&a| pseudo_log(1.0 + a, eps).0).sum::<f64>()
}

/// Vector dual solve: damped Newton on the convex dual `−Σ log⋆(1 + λᵀφ_i)`.
pub fn solve_vector_el(scores: &DMatrix<f64>) -> Result<ElSolution> {
    let (n, p) = scores.shape();
    if p == 0 {
        return Err(Error::Dimension("scores have no columns".into()));
    }
    if p == 1 {
        let col: Vec<f64> = scores.column(0).iter().copied().collect();
        return solve_scalar_el(&col);
    }
    if n <= p {
        return Err(Error::InvalidInput(format!("{n} scores cannot constrain {p} dimensions")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let cov = scores.transpose() * scores;
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let max_eig = eig.max();
    if !(eig.min() > 1e-12 * max_eig) {
        return Err(Error::Singular("score covariance is singular".into()));
    }
    let eps = 1.0 / n as f64;
    let scale: f64 = scores.row_iter().map(|r| r.norm()).sum();
    let tol = TOL * scale;
    let mut lambda = DVector::zeros(p);
    let mut value = dual_objective(scores, &lambda, eps);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITER {
        iterations += 1;
        let arg = scores * &lambda;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let (_, d1, d2) = pseudo_log(1.0 + arg[i], eps);
            let row = scores.row(i).transpose();
            grad -= &row * d1;
            hess.ger(-d2, &row, &row, 1.0);
        }
        if grad.norm() < tol {
            converged = true;
            break;
        }
        let Some(chol) = hess.cholesky() else {
            return Err(Error::Singular("EL dual Hessian lost definiteness".into()));
        };
        let step = -chol.solve(&grad);
        let slope = grad.dot(&step);
        // Newton decrement: the remaining gain in the objective is about −slope/2,
        // below which line searches only see rounding noise.
        if -slope < DECREMENT_TOL {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &lambda + &step * t;
            let v = dual_objective(scores, &trial, eps);
            if v <= value + 1e-4 * t * slope {
                lambda = trial;
                value = v;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        // Escaping to −∞ means no interior solution exists.
        if value < -40.0 * n as f64 {
            return Ok(ElSolution::hull_violation(n, p));
        }
    }
    let arg = scores * &lambda;
    // At an interior solution Σ 1/(1 + λᵀφ_i) = n; a vanishing gradient far
    // out along a recession direction fails this.
    let mass = arg.iter().map(|&a| 1.0 / (1.0 + a)).sum::<f64>() / n as f64;
    if !converged || arg.iter().any(|&a| 1.0 + a < eps) || (mass - 1.0).abs() > 1e-6 {
        return Ok(ElSolution { iterations, ..ElSolution::hull_violation(n, p) });
    }
    let neg2logw = 2.0 * arg.iter().map(|&a| (1.0 + a).ln()).sum::<f64>();
    let weights = weights_from(arg.iter().map(|&a| 1.0 + a), n);
    Ok(ElSolution {
        lambda: lambda.iter().copied().collect(),
        weights,
        neg2logw: neg2logw.max(0.0),
        hull_ok: true,
        iterations,
    })
}

/// Leading-order approximation `(Σ Z)² / Σ Z²` of `−2 log W`.
pub fn neg2logw_closed_form(z: &[f64]) -> f64 {
    let sum: f64 = z.iter().sum();
    let sq: f64 = z.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        0.0
    } else {
        sum * sum / sq
    }
}
