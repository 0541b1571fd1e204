//! Least squares for the fixed effects, the Gram system of the variance
//! designs, the closed-form nuisance estimator and the two-step
//! nonparametric covariance estimator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{frobenius, ModelDataset, SubjectBlock};

/// Relative condition number above which `Ξ` is treated as singular.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

const RANK_TOL: f64 = 1e-10;

/// QR factorisation of the stacked fixed-effect design, reusable across responses.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    offsets: Vec<usize>,
}

impl LeastSquares {
    pub fn new(subjects: &[SubjectBlock]) -> Result<Self> {
        let p = subjects.first().map(|s| s.x.ncols()).unwrap_or(0);
        let mut offsets = Vec::with_capacity(subjects.len() + 1);
        offsets.push(0);
        for s in subjects {
            offsets.push(offsets.last().unwrap() + s.n_obs());
        }
        let total = *offsets.last().unwrap();
        if total < p {
            return Err(Error::RankDeficient { columns: (total..p).collect() });
        }
        let mut x = DMatrix::zeros(total, p);
        for (s, &start) in subjects.iter().zip(&offsets) {
            x.view_mut((start, 0), (s.n_obs(), p)).copy_from(&s.x);
        }
        let norms: Vec<f64> = (0..p).map(|j| x.column(j).norm()).collect();
        let qr = x.qr();
        let r = qr.r();
        let q = qr.q();
        let deficient: Vec<usize> = (0..p)
            .filter(|&j| norms[j] == 0.0 || r[(j, j)].abs() <= RANK_TOL * norms[j])
            .collect();
        if !deficient.is_empty() {
            return Err(Error::RankDeficient { columns: deficient });
        }
        Ok(Self { q, r, offsets })
    }

    pub fn n_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// `(XᵀX)⁻¹Xᵀy` for stacked `y`.
    pub fn coefficients(&self, y: &DVector<f64>) -> DVector<f64> {
        let qty = self.q.tr_mul(y);
        self.r
            .solve_upper_triangular(&qty)
            .expect("triangular factor checked nonsingular at construction")
    }

    /// Coefficients for several stacked responses at once (one per column).
    pub fn coefficients_many(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let qty = self.q.tr_mul(y);
        self.r
            .solve_upper_triangular(&qty)
            .expect("triangular factor checked nonsingular at construction")
    }

    /// Splits a stacked vector back into per-subject pieces.
    pub fn split(&self, stacked: &DVector<f64>) -> Vec<DVector<f64>> {
        self.offsets
            .windows(2)
            .map(|w| stacked.rows(w[0], w[1] - w[0]).into_owned())
            .collect()
    }
}

pub fn stack_responses(subjects: &[SubjectBlock]) -> DVector<f64> {
    DVector::from_iterator(
        subjects.iter().map(|s| s.n_obs()).sum(),
        subjects.iter().flat_map(|s| s.y.iter().copied()),
    )
}

/// Ordinary least-squares fit with per-subject residual outer products.
#[derive(Debug, Clone)]
pub struct FitState {
    pub beta_hat: DVector<f64>,
    pub residuals: Vec<DVector<f64>>,
    pub r_hat: Vec<DMatrix<f64>>,
}

impl FitState {
    pub fn from_residuals(beta_hat: DVector<f64>, residuals: Vec<DVector<f64>>) -> Self {
        let r_hat = residuals.iter().map(|r| r * r.transpose()).collect();
        Self { beta_hat, residuals, r_hat }
    }
}

/// Least squares on the stacked system, computed from a QR factorisation.
pub fn fit_least_squares(dataset: &ModelDataset) -> Result<FitState> {
    let ls = LeastSquares::new(dataset.subjects())?;
    Ok(fit_with(&ls, dataset.subjects()))
}

pub(crate) fn fit_with(ls: &LeastSquares, subjects: &[SubjectBlock]) -> FitState {
    let y = stack_responses(subjects);
    let beta = ls.coefficients(&y);
    let residuals = subjects.iter().map(|s| &s.y - &s.x * &beta).collect();
    FitState::from_residuals(beta, residuals)
}

/// Fit-independent part of the Gram system: `Ξ`, its partition, `F` and `α`.
#[derive(Debug, Clone)]
pub struct DesignGram {
    /// `tr(Φ_ik Φ_il)` for every subject.
    pub subject_gram: Vec<DMatrix<f64>>,
    pub xi: DMatrix<f64>,
    pub xi_inv: DMatrix<f64>,
    pub f: DVector<f64>,
    pub alpha: f64,
    pub condition: f64,
}

/// Per-subject traces `tr(Φ_ik Φ_il)`.
pub fn subject_gram(subject: &SubjectBlock) -> DMatrix<f64> {
    let d = subject.phi.len();
    let mut g = DMatrix::zeros(d, d);
    for k in 0..d {
        for l in k..d {
            let v = frobenius(&subject.phi[k], &subject.phi[l]);
            g[(k, l)] = v;
            g[(l, k)] = v;
        }
    }
    g
}

/// `λ_max / λ_min` of a symmetric matrix; infinite when not positive definite.
pub fn symmetric_condition(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || max <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn gram_matrix(subjects: &[SubjectBlock]) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let grams: Vec<DMatrix<f64>> = subjects.iter().map(subject_gram).collect();
    let d = grams.first().map(|g| g.nrows()).unwrap_or(0);
    let mut xi = DMatrix::zeros(d, d);
    for g in &grams {
        xi += g;
    }
    (grams, xi)
}

impl DesignGram {
    pub fn new(subjects: &[SubjectBlock]) -> Result<Self> {
        let (subject_gram, xi) = gram_matrix(subjects);
        Self::from_parts(subject_gram, xi)
    }

    fn from_parts(subject_gram: Vec<DMatrix<f64>>, xi: DMatrix<f64>) -> Result<Self> {
        let d = xi.nrows();
        let condition = symmetric_condition(&xi);
        if !(condition <= MAX_GRAM_CONDITION) {
            return Err(Error::SingularGram { condition });
        }
        let xi_inv = xi
            .clone()
            .cholesky()
            .ok_or(Error::SingularGram { condition })?
            .inverse();
        let (f, alpha) = if d == 1 {
            (DVector::zeros(0), 1.0)
        } else {
            let e22 = xi.view((1, 1), (d - 1, d - 1)).into_owned();
            let e21 = xi.view((1, 0), (d - 1, 1)).column(0).into_owned();
            let c22 = symmetric_condition(&e22);
            if !(c22 <= MAX_GRAM_CONDITION) {
                return Err(Error::SingularGram { condition: c22 });
            }
            let f = e22
                .cholesky()
                .ok_or(Error::SingularGram { condition: c22 })?
                .solve(&e21);
            let e11 = xi[(0, 0)];
            let alpha = 1.0 - e21.dot(&f) / e11;
            if !(alpha > 0.0 && alpha <= 1.0 + 1e-12) {
                return Err(Error::Singular(format!("projection constant alpha = {alpha} outside (0, 1]")));
            }
            (f, alpha.min(1.0))
        };
        Ok(Self { subject_gram, xi, xi_inv, f, alpha, condition })
    }

    pub fn d(&self) -> usize {
        self.xi.nrows()
    }

    /// Weights `w = (1, −F₁, …, −F_{d−1})` of the projected design `Φ_i1 − Σ F_q Φ_{i,q+1}`.
    pub fn projection_weights(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.d());
        w[0] = 1.0;
        for q in 0..self.f.len() {
            w[q + 1] = -self.f[q];
        }
        w
    }
}

/// Quadratic forms `tr(Φ_ik R̂_i) = r̂_iᵀ Φ_ik r̂_i` for one subject.
pub fn residual_traces(subject: &SubjectBlock, residual: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        subject.phi.len(),
        subject.phi.iter().map(|phi| residual.dot(&(phi * residual))),
    )
}

/// `Ξ`, `Υ̂`, `F` and `α` for a fitted dataset.
#[derive(Debug, Clone)]
pub struct GramSystem {
    pub design: DesignGram,
    pub upsilon: DVector<f64>,
    /// `tr(Φ_ik R̂_i)` per subject.
    pub subject_traces: Vec<DVector<f64>>,
}

impl GramSystem {
    pub fn xi(&self) -> &DMatrix<f64> {
        &self.design.xi
    }

    pub fn f(&self) -> &DVector<f64> {
        &self.design.f
    }

    pub fn alpha(&self) -> f64 {
        self.design.alpha
    }

    pub fn from_design(design: DesignGram, subjects: &[SubjectBlock], residuals: &[DVector<f64>]) -> Self {
        let subject_traces: Vec<DVector<f64>> = subjects
            .iter()
            .zip(residuals)
            .map(|(s, r)| residual_traces(s, r))
            .collect();
        let mut upsilon = DVector::zeros(design.d());
        for u in &subject_traces {
            upsilon += u;
        }
        Self { design, upsilon, subject_traces }
    }
}

pub fn gram_system(dataset: &ModelDataset, fit: &FitState) -> Result<GramSystem> {
    let design = DesignGram::new(dataset.subjects())?;
    Ok(GramSystem::from_design(design, dataset.subjects(), &fit.residuals))
}

/// Closed-form nuisance estimate: components `2..d` of `Ξ⁻¹Υ̂`.
#[derive(Debug, Clone, Serialize)]
pub struct NuisanceEstimate {
    /// The full unconstrained solution `Ξ⁻¹Υ̂`.
    pub theta_full: Vec<f64>,
    pub nuisance: Vec<f64>,
    /// Set for every nuisance component with `θ̂_q ≤ 0`.
    pub nonpositive: Vec<bool>,
}

pub fn nuisance_theta(gram: &GramSystem) -> NuisanceEstimate {
    let full = &gram.design.xi_inv * &gram.upsilon;
    let theta_full: Vec<f64> = full.iter().copied().collect();
    let nuisance = theta_full[1..].to_vec();
    let nonpositive = nuisance.iter().map(|&v| v <= 0.0).collect();
    NuisanceEstimate { theta_full, nuisance, nonpositive }
}

/// Result of a nonnegative quadratic program `min xᵀGx − 2bᵀx, x ≥ 0`.
#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// Quadratic objective after each accepted iterate, starting at `x = 0`.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn quadratic_objective(g: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(g * x)) - 2.0 * b.dot(x)
}

fn solve_passive(g: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> Option<DVector<f64>> {
    let idx: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let sub = g.select_rows(&idx).select_columns(&idx);
    let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&j| b[j]));
    let sol = sub.cholesky()?.solve(&rhs);
    let mut full = DVector::zeros(passive.len());
    for (k, &j) in idx.iter().enumerate() {
        full[j] = sol[k];
    }
    Some(full)
}

/// Active-set (Lawson–Hanson) solver on the normal equations of a
/// nonnegative least-squares problem with positive definite Gram matrix `g`.
pub fn nnls_gram(g: &DMatrix<f64>, b: &DVector<f64>) -> Result<NnlsSolution> {
    let d = b.len();
    let scale = b.amax().max(g.amax()).max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    let mut x = DVector::zeros(d);
    let mut passive = vec![false; d];
    let mut trace = vec![0.0];
    let mut iterations = 0;
    let max_outer = 3 * d + 10;
    for _ in 0..max_outer {
        let w = b - g * &x;
        let mut blocked = vec![false; d];
        let mut entered = None;
        loop {
            let candidate = (0..d)
                .filter(|&j| !passive[j] && !blocked[j] && w[j] > tol)
                .max_by(|&a, &c| w[a].total_cmp(&w[c]));
            let Some(j) = candidate else { break };
            passive[j] = true;
            let s = solve_passive(g, b, &passive)
                .ok_or_else(|| Error::Singular("active-set subproblem not positive definite".into()))?;
            if s[j] <= 0.0 {
                passive[j] = false;
                blocked[j] = true;
                continue;
            }
            entered = Some(s);
            break;
        }
        let Some(mut s) = entered else {
            return Ok(NnlsSolution { x, objective_trace: trace, iterations });
        };
        loop {
            iterations += 1;
            if (0..d).all(|j| !passive[j] || s[j] > 0.0) {
                x = s;
                break;
            }
            let mut step = 1.0_f64;
            for j in 0..d {
                if passive[j] && s[j] <= 0.0 {
                    step = step.min(x[j] / (x[j] - s[j]));
                }
            }
            x = &x + (&s - &x) * step;
            for j in 0..d {
                if passive[j] && x[j] <= tol * 1e-3 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            s = solve_passive(g, b, &passive)
                .ok_or_else(|| Error::Singular("active-set subproblem not positive definite".into()))?;
        }
        trace.push(quadratic_objective(g, b, &x));
    }
    Err(Error::NotConverged("active-set iteration limit reached".into()))
}

/// Output of the two-step covariance estimator.
#[derive(Debug, Clone)]
pub struct TwoStepCovariance {
    pub theta: DVector<f64>,
    /// Regularised `Ĥ_in = H_i(θ̂)` per subject.
    pub h_hat: Vec<DMatrix<f64>>,
    /// Subjects that received a diagonal ridge.
    pub ridged: Vec<bool>,
    /// `Σ_i ‖H_i(θ) − R̂_i‖²_F` along the solver iterates.
    pub objective_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Absolute ridge used when the fitted covariance vanishes entirely.
pub const ZERO_COVARIANCE_RIDGE: f64 = 1e-8;

/// `min_{θ ≥ 0} Σ_i ‖H_i(θ) − r̂_i r̂_iᵀ‖²_F`, followed by a ridge on any
/// near-singular `H_i(θ̂)`.
pub fn two_step_covariance(dataset: &ModelDataset, fit: &FitState) -> Result<TwoStepCovariance> {
    let gram = gram_system(dataset, fit)?;
    let sol = nnls_gram(gram.xi(), &gram.upsilon)?;
    let constant: f64 = fit.residuals.iter().map(|r| r.norm_squared().powi(2)).sum();
    let objective_trace = sol.objective_trace.iter().map(|v| v + constant).collect();
    let mut warnings = Vec::new();
    let mut ridged = Vec::with_capacity(dataset.n());
    let mut h_hat = Vec::with_capacity(dataset.n());
    for s in dataset.subjects() {
        let ni = s.n_obs();
        let mut h = DMatrix::zeros(ni, ni);
        for (phi, &w) in s.phi.iter().zip(sol.x.iter()) {
            h += phi * w;
        }
        let tr = h.trace();
        if !(tr > 0.0) {
            h = DMatrix::identity(ni, ni) * ZERO_COVARIANCE_RIDGE;
            ridged.push(true);
            warnings.push(format!("subject {}: fitted covariance is zero; using ridge identity", s.id));
        } else {
            let min_eig = SymmetricEigen::new(h.clone()).eigenvalues.min();
            if min_eig < 1e-10 * tr {
                let eps = 1e-8 * tr / ni as f64;
                for j in 0..ni {
                    h[(j, j)] += eps;
                }
                ridged.push(true);
            } else {
                ridged.push(false);
            }
        }
        h_hat.push(h);
    }
    Ok(TwoStepCovariance { theta: sol.x, h_hat, ridged, objective_trace, warnings })
}
