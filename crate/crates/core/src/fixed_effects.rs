//! Empirical-likelihood inference for the fixed effects based on the
//! estimating functions `φ_i(β) = X_iᵀĤ_i⁻¹(y_i − X_iβ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{chi2_quantile, chi2_sf};
use crate::el::solve_vector_el;
use crate::error::{Error, Result};
use crate::estimation::{fit_least_squares, two_step_covariance};
use crate::model::ModelDataset;

/// Working covariance used in the estimating functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `Ĥ_i` from the two-step nonnegative least-squares fit.
    #[default]
    TwoStep,
    /// `Ĥ_i = I` (working independence).
    Identity,
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedEffectsResult {
    pub beta_null: Vec<f64>,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub hull_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceInterval {
    pub coef: usize,
    pub level: f64,
    pub estimate: f64,
    /// `-∞` (serialised as null) when the level set is unbounded below.
    pub lower: f64,
    pub upper: f64,
    /// Sandwich standard error used to scale the search.
    pub se: f64,
    pub lower_unbounded: bool,
    pub upper_unbounded: bool,
}

fn invert_spd(h: &DMatrix<f64>, id: &str) -> Result<DMatrix<f64>> {
    h.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(format!("working covariance of subject {id} is not positive definite")))
}

/// Rows `φ_i(β)ᵀ` for explicit working covariances.
pub fn phi_scores(dataset: &ModelDataset, beta: &DVector<f64>, h_hat: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if h_hat.len() != dataset.n() {
        return Err(Error::Dimension(format!("{} working covariances for {} subjects", h_hat.len(), dataset.n())));
    }
    if beta.len() != dataset.p() {
        return Err(Error::Dimension(format!("beta has length {}, expected {}", beta.len(), dataset.p())));
    }
    let mut out = DMatrix::zeros(dataset.n(), dataset.p());
    for (i, (s, h)) in dataset.subjects().iter().zip(h_hat).enumerate() {
        if h.nrows() != s.n_obs() || h.ncols() != s.n_obs() {
            return Err(Error::Dimension(format!("working covariance of subject {} has wrong size", s.id)));
        }
        let w = invert_spd(h, &s.id)?;
        let row = s.x.transpose() * (w * (&s.y - &s.x * beta));
        out.set_row(i, &row.transpose());
    }
    Ok(out)
}

/// Precomputed affine pieces `φ_i(β) = c_i − G_iβ`.
#[derive(Debug, Clone)]
pub struct FixedEffects {
    c: Vec<DVector<f64>>,
    g: Vec<DMatrix<f64>>,
    a: DMatrix<f64>,
    estimate: DVector<f64>,
}

impl FixedEffects {
    pub fn new(dataset: &ModelDataset, weighting: Weighting) -> Result<Self> {
        let h_hat = match weighting {
            Weighting::Identity => dataset.subjects().iter().map(|s| DMatrix::identity(s.n_obs(), s.n_obs())).collect(),
            Weighting::TwoStep => {
                let fit = fit_least_squares(dataset)?;
                two_step_covariance(dataset, &fit)?.h_hat
            }
        };
        Self::with_covariances(dataset, &h_hat)
    }

    pub fn with_covariances(dataset: &ModelDataset, h_hat: &[DMatrix<f64>]) -> Result<Self> {
        if h_hat.len() != dataset.n() {
            return Err(Error::Dimension(format!("{} working covariances for {} subjects", h_hat.len(), dataset.n())));
        }
        let p = dataset.p();
        let mut c = Vec::with_capacity(dataset.n());
        let mut g = Vec::with_capacity(dataset.n());
        let mut a = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for (s, h) in dataset.subjects().iter().zip(h_hat) {
            let w = invert_spd(h, &s.id)?;
            let xtw = s.x.transpose() * w;
            let ci = &xtw * &s.y;
            let gi = &xtw * &s.x;
            a += &gi;
            rhs += &ci;
            c.push(ci);
            g.push(gi);
        }
        let estimate = a
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .ok_or_else(|| Error::Singular("weighted normal matrix is singular".into()))?;
        Ok(Self { c, g, a, estimate })
    }

    pub fn p(&self) -> usize {
        self.a.nrows()
    }

    /// Solution of `Σ φ_i(β) = 0`.
    pub fn estimate(&self) -> &DVector<f64> {
        &self.estimate
    }

    pub fn scores(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.c.len(), self.p());
        for (i, (c, g)) in self.c.iter().zip(&self.g).enumerate() {
            out.set_row(i, &(c - g * beta).transpose());
        }
        out
    }

    /// `A⁻¹VA⁻¹` at the estimate, with `A = Σ G_i` and `V = Σ φ_iφ_iᵀ`.
    pub fn sandwich(&self) -> Result<DMatrix<f64>> {
        let s = self.scores(&self.estimate);
        let v = s.transpose() * &s;
        let a_inv = self
            .a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("weighted normal matrix is singular".into()))?;
        Ok(&a_inv * v * &a_inv)
    }

    pub fn test(&self, beta0: &DVector<f64>) -> Result<FixedEffectsResult> {
        if beta0.len() != self.p() {
            return Err(Error::Dimension(format!("beta0 has length {}, expected {}", beta0.len(), self.p())));
        }
        let sol = solve_vector_el(&self.scores(beta0))?;
        let dof = self.p();
        let p_value = if sol.hull_ok { chi2_sf(sol.neg2logw, dof) } else { 0.0 };
        Ok(FixedEffectsResult {
            beta_null: beta0.iter().copied().collect(),
            statistic: sol.neg2logw,
            dof,
            p_value,
            hull_ok: sol.hull_ok,
        })
    }

    fn assemble(&self, k: usize, b: f64, eta: &DVector<f64>) -> DVector<f64> {
        let mut beta = DVector::zeros(self.p());
        let mut j = 0;
        for c in 0..self.p() {
            if c == k {
                beta[c] = b;
            } else {
                beta[c] = eta[j];
                j += 1;
            }
        }
        beta
    }

    /// `−2 log ELR` at `β`, with its gradient in `β` (zero-length when the hull fails).
    fn evaluate(&self, beta: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let scores = self.scores(beta);
        let sol = solve_vector_el(&scores)?;
        if !sol.hull_ok {
            return Ok((f64::INFINITY, DVector::zeros(0), scores));
        }
        let lambda = DVector::from_vec(sol.lambda);
        let mut grad = DVector::zeros(self.p());
        for (i, g) in self.g.iter().enumerate() {
            let row = scores.row(i).transpose();
            let denom = 1.0 + lambda.dot(&row);
            grad -= g * &lambda * (2.0 / denom);
        }
        Ok((sol.neg2logw, grad, scores))
    }

    fn drop_index(v: &DVector<f64>, k: usize) -> DVector<f64> {
        DVector::from_iterator(v.len() - 1, v.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, x)| *x))
    }

    /// Profile statistic `min_η −2 log ELR(β_k = b, β_{−k} = η)` and its minimiser.
    pub fn profile(&self, k: usize, b: f64, starts: &[DVector<f64>]) -> Result<(f64, DVector<f64>)> {
        let p = self.p();
        if p == 1 {
            let beta = DVector::from_element(1, b);
            return Ok((self.evaluate(&beta)?.0, DVector::zeros(0)));
        }
        let mut best: Option<(f64, DVector<f64>, DVector<f64>, DMatrix<f64>)> = None;
        for s in starts {
            let (v, g, sc) = self.evaluate(&self.assemble(k, b, s))?;
            if v.is_finite() && best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, s.clone(), g, sc));
            }
        }
        let Some((mut value, mut eta, mut grad, mut scores)) = best else {
            return Ok((f64::INFINITY, starts.first().cloned().unwrap_or_else(|| DVector::zeros(p - 1))));
        };
        let a_red = self.a.clone().remove_column(k);
        for _ in 0..100 {
            let g = Self::drop_index(&grad, k);
            let cov = scores.transpose() * &scores;
            let Some(cov_inv) = cov.try_inverse() else { break };
            let hess = a_red.transpose() * cov_inv * &a_red * 2.0;
            let Some(chol) = hess.cholesky() else { break };
            let step = -chol.solve(&g);
            let slope = g.dot(&step);
            if -slope < 1e-14 * (1.0 + value) {
                break;
            }
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let trial = &eta + &step * t;
                let (v, gr, sc) = self.evaluate(&self.assemble(k, b, &trial))?;
                if v <= value + 1e-4 * t * slope {
                    eta = trial;
                    value = v;
                    grad = gr;
                    scores = sc;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        Ok((value.max(0.0), eta))
    }

    /// Profile empirical-likelihood interval `{b : min_η −2 log ELR ≤ χ²₁(level)}`.
    pub fn confidence_interval(&self, k: usize, level: f64) -> Result<ConfidenceInterval> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidInput(format!("level {level} must lie in (0, 1)")));
        }
        if k >= self.p() {
            return Err(Error::InvalidInput(format!("coefficient {k} out of range for p = {}", self.p())));
        }
        let crit = chi2_quantile(level, 1);
        let sandwich = self.sandwich()?;
        let bkk = sandwich[(k, k)];
        if !(bkk > 0.0) {
            return Err(Error::Singular("sandwich variance of the coefficient is zero".into()));
        }
        let se = bkk.sqrt();
        let est = self.estimate[k];
        let rest = Self::drop_index(&self.estimate, k);
        let slope = Self::drop_index(&sandwich.column(k).into_owned(), k) / bkk;
        let conditional = |b: f64| &rest + &slope * (b - est);
        let mut lower = est;
        let mut upper = est;
        let mut unbounded = [false, false];
        for (side, sign) in [(0usize, -1.0f64), (1, 1.0)] {
            let mut inside = (est, rest.clone());
            let mut distance = 50.0 * se;
            let mut outside = None;
            for _ in 0..12 {
                let b = est + sign * distance;
                let (stat, eta) = self.profile(k, b, &[conditional(b), inside.1.clone()])?;
                if stat > crit {
                    outside = Some(b);
                    break;
                }
                inside = (b, eta);
                distance *= 4.0;
            }
            let Some(mut out_b) = outside else {
                unbounded[side] = true;
                if side == 0 {
                    lower = f64::NEG_INFINITY;
                } else {
                    upper = f64::INFINITY;
                }
                continue;
            };
            while (out_b - inside.0).abs() > 1e-6 * se {
                let mid = 0.5 * (inside.0 + out_b);
                let (stat, eta) = self.profile(k, mid, &[conditional(mid), inside.1.clone()])?;
                if stat > crit {
                    out_b = mid;
                } else {
                    inside = (mid, eta);
                }
            }
            let endpoint = 0.5 * (inside.0 + out_b);
            if side == 0 {
                lower = endpoint;
            } else {
                upper = endpoint;
            }
        }
        Ok(ConfidenceInterval {
            coef: k,
            level,
            estimate: est,
            lower,
            upper,
            se,
            lower_unbounded: unbounded[0],
            upper_unbounded: unbounded[1],
        })
    }
}

/// EL test of `H₀: β = β₀` with two-step weighting.
pub fn test_beta(dataset: &ModelDataset, beta0: &DVector<f64>) -> Result<FixedEffectsResult> {
    FixedEffects::new(dataset, Weighting::TwoStep)?.test(beta0)
}

/// Weighted least-squares solution of the estimating equations.
pub fn estimate_beta_el(dataset: &ModelDataset) -> Result<DVector<f64>> {
    Ok(FixedEffects::new(dataset, Weighting::TwoStep)?.estimate.clone())
}

pub fn ci_coefficient(dataset: &ModelDataset, coef_index: usize, level: f64) -> Result<ConfidenceInterval> {
    FixedEffects::new(dataset, Weighting::TwoStep)?.confidence_interval(coef_index, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SubjectBlock;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_subject(id: &str, y: Vec<f64>) -> SubjectBlock {
        let n = y.len();
        SubjectBlock::new(id, DVector::from_vec(y), DMatrix::from_element(n, 1, 1.0), vec![DMatrix::identity(n, n)])
    }

    fn identity_h(ds: &ModelDataset) -> Vec<DMatrix<f64>> {
        ds.subjects().iter().map(|s| DMatrix::identity(s.n_obs(), s.n_obs())).collect()
    }

    #[test]
    fn identity_scores_by_hand() {
        // Residuals (1, −1) per subject with unit designs: φ_i = 1ᵀr_i.
        let ds = ModelDataset::new(vec![scalar_subject("a", vec![2.0, 1.0]), scalar_subject("b", vec![0.0, -1.0])]).unwrap();
        let beta = DVector::from_element(1, 0.5);
        let phi = phi_scores(&ds, &beta, &identity_h(&ds)).unwrap();
        assert_relative_eq!(phi[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(phi[(1, 0)], -2.0, epsilon = 1e-14);
    }

    #[test]
    fn exact_fit_has_zero_scores() {
        let ds = ModelDataset::new(vec![scalar_subject("a", vec![3.0, 3.0]), scalar_subject("b", vec![3.0])]).unwrap();
        let phi = phi_scores(&ds, &DVector::from_element(1, 3.0), &identity_h(&ds)).unwrap();
        assert!(phi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heteroscedastic_weighted_estimate_by_hand() {
        // With X_i = 1 and Ĥ₁ = I₂, Ĥ₂ = 4·I₁:
        // A = 2 + 1/4, Σ c_i = (1 + 3) + 8/4, so β̃ = 6 / 2.25.
        let ds = ModelDataset::new(vec![scalar_subject("a", vec![1.0, 3.0]), scalar_subject("b", vec![8.0])]).unwrap();
        let h = vec![DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 4.0)];
        let fe = FixedEffects::with_covariances(&ds, &h).unwrap();
        assert_relative_eq!(fe.estimate()[0], 6.0 / 2.25, epsilon = 1e-13);
    }

    fn simulated(n: usize, seed: u64) -> (ModelDataset, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = DVector::from_vec(vec![1.0, -0.5, 0.25]);
        let subjects = (0..n)
            .map(|i| {
                let m = rng.random_range(2..6);
                let x = DMatrix::from_fn(m, 3, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
                let b: f64 = rng.sample(StandardNormal);
                let e = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal) + b);
                let y = &x * &beta + e;
                let j = DMatrix::from_element(m, m, 1.0);
                SubjectBlock::new(format!("s{i}"), y, x, vec![j, DMatrix::identity(m, m)])
            })
            .collect();
        (ModelDataset::new(subjects).unwrap(), beta)
    }

    #[test]
    fn identity_weighting_matches_least_squares() {
        let (ds, _) = simulated(40, 1);
        let fe = FixedEffects::new(&ds, Weighting::Identity).unwrap();
        let ls = fit_least_squares(&ds).unwrap();
        assert!((fe.estimate() - &ls.beta_hat).amax() < 1e-10);
    }

    #[test]
    fn statistic_vanishes_at_estimate() {
        let (ds, _) = simulated(60, 2);
        let fe = FixedEffects::new(&ds, Weighting::TwoStep).unwrap();
        let r = fe.test(&fe.estimate().clone()).unwrap();
        assert!(r.statistic.abs() < 1e-8);
        assert!((r.p_value - 1.0).abs() < 1e-8);
        assert_eq!(r.dof, 3);
    }

    #[test]
    fn distant_null_is_rejected() {
        let (ds, beta) = simulated(100, 3);
        let far = beta.add_scalar(3.0);
        let r = test_beta(&ds, &far).unwrap();
        assert!(r.p_value < 1e-4);
    }

    #[test]
    fn statistic_is_permutation_invariant() {
        let (ds, beta) = simulated(50, 4);
        let mut subs = ds.subjects().to_vec();
        subs.reverse();
        let rev = ModelDataset::new(subs).unwrap();
        let b0 = beta.add_scalar(0.05);
        let a = test_beta(&ds, &b0).unwrap().statistic;
        let b = test_beta(&rev, &b0).unwrap().statistic;
        assert!((a - b).abs() < 1e-8 * a.max(1.0));
    }

    #[test]
    fn interval_endpoints_hit_the_critical_value() {
        let (ds, _) = simulated(80, 5);
        let fe = FixedEffects::new(&ds, Weighting::TwoStep).unwrap();
        let crit = chi2_quantile(0.95, 1);
        for k in 0..3 {
            let ci = fe.confidence_interval(k, 0.95).unwrap();
            assert!(ci.lower < ci.estimate && ci.estimate < ci.upper);
            let rest = FixedEffects::drop_index(fe.estimate(), k);
            for end in [ci.lower, ci.upper] {
                let (stat, _) = fe.profile(k, end, &[rest.clone()]).unwrap();
                assert!((stat - crit).abs() < 1e-4, "coef {k}: stat {stat} at {end}");
            }
        }
    }

    #[test]
    fn symmetric_data_gives_symmetric_interval() {
        let vals = [-3.0, -1.5, -0.5, 0.0, 0.5, 1.5, 3.0, -2.0, 2.0, -0.2, 0.2];
        let subjects = vals.iter().enumerate().map(|(i, &v)| scalar_subject(&format!("s{i}"), vec![5.0 + v])).collect();
        let ds = ModelDataset::new(subjects).unwrap();
        let fe = FixedEffects::new(&ds, Weighting::Identity).unwrap();
        let ci = fe.confidence_interval(0, 0.95).unwrap();
        assert_relative_eq!(ci.estimate, 5.0, epsilon = 1e-12);
        assert!(((ci.upper - 5.0) - (5.0 - ci.lower)).abs() < 1e-4);
    }

    #[test]
    fn bad_level_is_rejected() {
        let (ds, _) = simulated(30, 6);
        let fe = FixedEffects::new(&ds, Weighting::Identity).unwrap();
        assert!(fe.confidence_interval(0, 1.0).is_err());
        assert!(fe.confidence_interval(5, 0.9).is_err());
    }
}
