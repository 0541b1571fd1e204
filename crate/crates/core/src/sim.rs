//! Twin-family simulator and Monte Carlo experiment drivers.
//!
//! Responses follow `y_i(t) = X_iβ(t) + T_i a_i(t) + τ_i(t)` with
//! `a_i = g_i + c_i + e_i` (additive genetic, common and unique environment).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::normal_quantile;
use crate::error::{Error, Result};
use crate::global::{global_test_from_scores, grid_scores, scan_from_scores, GridSubject, OutcomeGrid};
use crate::local_test::{local_test, nuisance_fallback, TestMode, FALLBACK_LEVEL};
use crate::model::{build_twin_phis, TwinZygosity};
use crate::rng::{derive_seed, stream};

/// Tolerance for matching grid points in indicator signals.
const GRID_MATCH: f64 = 1e-9;

/// Scalar function of `t` used for the `C_a`, `C_e`, `C_m` scalings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSpec {
    Constant { value: f64 },
    /// `value` at the listed points and zero elsewhere.
    Indicator { value: f64, at: Vec<f64> },
}

impl SignalSpec {
    pub fn constant(value: f64) -> Self {
        SignalSpec::Constant { value }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            SignalSpec::Constant { value } => *value,
            SignalSpec::Indicator { value, at } => {
                if at.iter().any(|a| (a - t).abs() < GRID_MATCH) {
                    *value
                } else {
                    0.0
                }
            }
        }
    }

    /// Same shape with a new magnitude.
    pub fn with_value(&self, v: f64) -> Self {
        match self {
            SignalSpec::Constant { .. } => SignalSpec::Constant { value: v },
            SignalSpec::Indicator { at, .. } => SignalSpec::Indicator { value: v, at: at.clone() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `√2 sin(2πt)`
    Sin,
    /// `√2 cos(2πt)`
    Cos,
}

impl Basis {
    pub fn eval(self, t: f64) -> f64 {
        let arg = 2.0 * PI * t;
        std::f64::consts::SQRT_2 * if self == Basis::Sin { arg.sin() } else { arg.cos() }
    }
}

/// `σ²(t) = C(t) Σ_l w_l ψ_l(t)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenExpansion {
    pub scale: SignalSpec,
    pub weights: Vec<f64>,
    pub basis: Vec<Basis>,
}

impl EigenExpansion {
    pub fn eval(&self, t: f64) -> f64 {
        let c = self.scale.eval(t);
        c * self.weights.iter().zip(&self.basis).map(|(w, b)| w * b.eval(t).powi(2)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFunctionSpec {
    pub a: EigenExpansion,
    pub e: EigenExpansion,
    pub m: EigenExpansion,
}

impl VarianceFunctionSpec {
    pub fn new(c_a: SignalSpec, c_e: SignalSpec, c_m: SignalSpec) -> Self {
        Self {
            a: EigenExpansion { scale: c_a, weights: vec![0.5, 1.0], basis: vec![Basis::Sin, Basis::Cos] },
            e: EigenExpansion { scale: c_e, weights: vec![0.6, 0.9], basis: vec![Basis::Cos, Basis::Sin] },
            m: EigenExpansion { scale: c_m, weights: vec![0.5, 1.0], basis: vec![Basis::Cos, Basis::Sin] },
        }
    }
}

impl Default for VarianceFunctionSpec {
    fn default() -> Self {
        Self::new(SignalSpec::constant(0.0), SignalSpec::constant(0.1), SignalSpec::constant(0.08))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaValues {
    pub sigma_a2: f64,
    pub sigma_c2: f64,
    pub sigma_e2: f64,
    pub sigma_m2: f64,
}

/// Variance functions at `t`; the common-environment variance is zero.
pub fn sigma_functions(spec: &VarianceFunctionSpec, t: f64) -> SigmaValues {
    SigmaValues { sigma_a2: spec.a.eval(t), sigma_c2: 0.0, sigma_e2: spec.e.eval(t), sigma_m2: spec.m.eval(t) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSpec {
    Constant { value: f64 },
    /// Quantile function of `N(mean, variance)` evaluated at `t`.
    NormalQuantile { mean: f64, variance: f64 },
}

impl BetaSpec {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            BetaSpec::Constant { value } => *value,
            BetaSpec::NormalQuantile { mean, variance } => normal_quantile(t, *mean, *variance),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    #[default]
    Gaussian,
    StudentT3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Fresh random effects and noise at every grid point.
    #[default]
    IndependentPerT,
    /// One standardised draw per family, scaled by `σ(t)` at every grid point.
    SharedMultiplier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_mz: usize,
    pub n_dz: usize,
    /// Inclusive range for the number of measures per twin.
    pub rep_min: usize,
    pub rep_max: usize,
    pub t_grid: Vec<f64>,
    pub variance: VarianceFunctionSpec,
    pub beta: Vec<BetaSpec>,
    pub family: ErrorFamily,
    pub coupling: Coupling,
    /// Noise variance for gaussian errors under per-t independence.
    pub tau_variance: f64,
    /// Noise scale matrix multiple for t₃ errors under per-t independence.
    pub tau_t_scale: f64,
    pub seed: u64,
}

pub fn default_t_grid() -> Vec<f64> {
    (0..50).map(|k| (2 * k + 1) as f64 / 100.0).collect()
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_mz: 50,
            n_dz: 50,
            rep_min: 3,
            rep_max: 7,
            t_grid: default_t_grid(),
            variance: VarianceFunctionSpec::default(),
            beta: vec![
                BetaSpec::NormalQuantile { mean: 1.0, variance: 6.0 },
                BetaSpec::Constant { value: 0.0 },
                BetaSpec::NormalQuantile { mean: 1.0, variance: 9.0 },
            ],
            family: ErrorFamily::Gaussian,
            coupling: Coupling::IndependentPerT,
            tau_variance: 0.3,
            tau_t_scale: 0.1,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mz + self.n_dz < 2 {
            return Err(Error::InvalidInput("need at least two families".into()));
        }
        if self.rep_min == 0 || self.rep_min > self.rep_max {
            return Err(Error::InvalidInput(format!("invalid measure range {}..={}", self.rep_min, self.rep_max)));
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidInput("t grid must be nonempty and inside (0, 1)".into()));
        }
        if self.t_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("t grid must be strictly increasing".into()));
        }
        if self.beta.is_empty() {
            return Err(Error::InvalidInput("beta list is empty".into()));
        }
        if !(self.tau_variance >= 0.0 && self.tau_t_scale >= 0.0) {
            return Err(Error::InvalidInput("noise scales must be nonnegative".into()));
        }
        for &t in &self.t_grid {
            let s = sigma_functions(&self.variance, t);
            if !(s.sigma_a2 >= 0.0 && s.sigma_e2 >= 0.0 && s.sigma_m2 >= 0.0) {
                return Err(Error::InvalidInput(format!("negative variance function value at t = {t}")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n_mz + self.n_dz
    }

    pub fn with_grid(&self, t_grid: Vec<f64>) -> Self {
        Self { t_grid, ..self.clone() }
    }

    /// Noise variance `θ₄(t)` implied by the configuration.
    pub fn noise_variance(&self, t: f64) -> f64 {
        match self.coupling {
            Coupling::SharedMultiplier => sigma_functions(&self.variance, t).sigma_m2,
            Coupling::IndependentPerT => match self.family {
                ErrorFamily::Gaussian => self.tau_variance,
                ErrorFamily::StudentT3 => 3.0 * self.tau_t_scale,
            },
        }
    }

    /// `θ*(t) = (σ²_A, σ²_C, σ²_E, noise)`.
    pub fn theta_at(&self, t: f64) -> [f64; 4] {
        let s = sigma_functions(&self.variance, t);
        [s.sigma_a2, s.sigma_c2, s.sigma_e2, self.noise_variance(t)]
    }

    pub fn beta_at(&self, t: f64) -> Vec<f64> {
        self.beta.iter().map(|b| b.eval(t)).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimTruth {
    pub t_values: Vec<f64>,
    pub theta: Vec<[f64; 4]>,
    pub beta: Vec<Vec<f64>>,
    pub zygosity: Vec<TwinZygosity>,
    pub members: Vec<(usize, usize)>,
}

/// Per-family latent draw generator for one vector.
struct Sampler {
    family: ErrorFamily,
    chi2: ChiSquared<f64>,
}

impl Sampler {
    fn new(family: ErrorFamily) -> Self {
        Self { family, chi2: ChiSquared::new(3.0).expect("three degrees of freedom") }
    }

    /// Draw with covariance `Σ = LLᵀ`: gaussian, or multivariate t₃ with scale
    /// `Σ/3`, using one χ²₃ draw for the whole vector.
    fn draw(&self, rng: &mut ChaCha20Rng, chol: &DMatrix<f64>) -> DVector<f64> {
        let k = chol.nrows();
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
        let v = chol * z;
        match self.family {
            ErrorFamily::Gaussian => v,
            ErrorFamily::StudentT3 => v / self.chi2.sample(rng).sqrt(),
        }
    }
}

fn twin_factor(zyg: TwinZygosity) -> DMatrix<f64> {
    let k = zyg.kinship();
    DMatrix::from_row_slice(2, 2, &[1.0, 0.0, k, (1.0 - k * k).sqrt()])
}

struct Family {
    zygosity: TwinZygosity,
    n1: usize,
    n2: usize,
    x: DMatrix<f64>,
}

impl Family {
    fn t_mat(&self) -> DMatrix<f64> {
        let n = self.n1 + self.n2;
        DMatrix::from_fn(n, 2, |r, c| if (r >= self.n1) == (c == 1) { 1.0 } else { 0.0 })
    }
}

fn draw_design(config: &SimConfig, rng: &mut ChaCha20Rng) -> Vec<Family> {
    let p = config.beta.len();
    (0..config.n())
        .map(|i| {
            let zygosity = if i < config.n_mz { TwinZygosity::Monozygotic } else { TwinZygosity::Dizygotic };
            let n1 = rng.random_range(config.rep_min..=config.rep_max);
            let n2 = rng.random_range(config.rep_min..=config.rep_max);
            let x = DMatrix::from_fn(n1 + n2, p, |_, c| match c {
                0 => 1.0,
                2 => 2.0 + rng.sample::<f64, _>(StandardNormal),
                _ => rng.sample::<f64, _>(StandardNormal),
            });
            Family { zygosity, n1, n2, x }
        })
        .collect()
}

/// Latent standardised draws `(ζ_a, ζ_c, ζ_e, ζ_τ)` for one family.
struct Latent {
    a: DVector<f64>,
    c: DVector<f64>,
    e: DVector<f64>,
    tau: DVector<f64>,
}

fn draw_latent(fam: &Family, sampler: &Sampler, rng: &mut ChaCha20Rng) -> Latent {
    let ones = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
    let n = fam.n1 + fam.n2;
    Latent {
        a: sampler.draw(rng, &twin_factor(fam.zygosity)),
        c: sampler.draw(rng, &ones),
        e: sampler.draw(rng, &DMatrix::identity(2, 2)),
        tau: sampler.draw(rng, &DMatrix::identity(n, n)),
    }
}

/// Simulated grid for replicate `rep`; the same `(config, rep)` gives the
/// same grid bit for bit.
pub fn generate_grid(config: &SimConfig, rep: u64) -> Result<(OutcomeGrid, SimTruth)> {
    config.validate()?;
    let rep_seed = derive_seed(config.seed, rep);
    let mut rng = stream(rep_seed, 0);
    let families = draw_design(config, &mut rng);
    let sampler = Sampler::new(config.family);
    let m = config.t_grid.len();
    let shared: Option<Vec<Latent>> = match config.coupling {
        Coupling::SharedMultiplier => Some(families.iter().map(|f| draw_latent(f, &sampler, &mut rng)).collect()),
        Coupling::IndependentPerT => None,
    };
    let mut ys: Vec<DMatrix<f64>> = families.iter().map(|f| DMatrix::zeros(f.n1 + f.n2, m)).collect();
    let mut theta = Vec::with_capacity(m);
    let mut betas = Vec::with_capacity(m);
    for (j, &t) in config.t_grid.iter().enumerate() {
        let th = config.theta_at(t);
        let beta = DVector::from_vec(config.beta_at(t));
        let sd_a = th[0].sqrt();
        let sd_c = th[1].sqrt();
        let sd_e = th[2].sqrt();
        let mut t_rng = stream(rep_seed, j as u64 + 1);
        for (i, fam) in families.iter().enumerate() {
            let fresh;
            let (latent, noise_sd) = match &shared {
                Some(l) => (&l[i], th[3].sqrt()),
                None => {
                    fresh = draw_latent(fam, &sampler, &mut t_rng);
                    let sd = match config.family {
                        ErrorFamily::Gaussian => config.tau_variance.sqrt(),
                        ErrorFamily::StudentT3 => (3.0 * config.tau_t_scale).sqrt(),
                    };
                    (&fresh, sd)
                }
            };
            let a = &latent.a * sd_a + &latent.c * sd_c + &latent.e * sd_e;
            let y = &fam.x * &beta + fam.t_mat() * a + &latent.tau * noise_sd;
            ys[i].set_column(j, &y);
        }
        theta.push(th);
        betas.push(beta.iter().copied().collect());
    }
    let subjects = families
        .iter()
        .zip(ys)
        .enumerate()
        .map(|(i, (f, y))| {
            Ok(GridSubject {
                id: format!("{}{}", f.zygosity.short(), i + 1),
                x: f.x.clone(),
                phi: build_twin_phis(f.n1, f.n2, f.zygosity)?.to_vec(),
                y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = SimTruth {
        t_values: config.t_grid.clone(),
        theta,
        beta: betas,
        zygosity: families.iter().map(|f| f.zygosity).collect(),
        members: families.iter().map(|f| (f.n1, f.n2)).collect(),
    };
    Ok((OutcomeGrid::new(config.t_grid.clone(), subjects)?, truth))
}

/// Single-outcome dataset at grid point `j`.
pub fn generate_dataset(config: &SimConfig, rep: u64, j: usize) -> Result<crate::model::ModelDataset> {
    if j >= config.t_grid.len() {
        return Err(Error::InvalidInput(format!("grid index {j} out of range")));
    }
    let (grid, _) = generate_grid(config, rep)?;
    Ok(grid.dataset_at(j)?.0)
}

/// One line of an experiment table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    /// `t`, `c₀`, or the window centre.
    pub x: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<(usize, f64, f64)>,
    pub estimate: f64,
    pub mc_se: f64,
    pub reps: usize,
}

fn rate_row(x: f64, window: Option<(usize, f64, f64)>, hits: usize, reps: usize) -> ExperimentRow {
    let p = hits as f64 / reps as f64;
    ExperimentRow { x, window, estimate: p, mc_se: (p * (1.0 - p) / reps as f64).sqrt(), reps }
}

/// Variance designs fitted by the experiments: `(A, E, noise)`. The simulated
/// common-environment variance is identically zero, and the tests require
/// every nuisance component to be strictly positive.
pub fn default_fit_components() -> Vec<usize> {
    vec![0, 2, 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalExperimentOptions {
    pub level: f64,
    pub mode: TestMode,
    /// Drop nonpositive nuisance estimates that pass their zero-test.
    pub fallback: bool,
    pub theta_null: f64,
    /// Indices into `(A, C, E, noise)` of the fitted designs; the first is tested.
    pub fit_components: Vec<usize>,
}

impl Default for LocalExperimentOptions {
    fn default() -> Self {
        Self {
            level: 0.05,
            mode: TestMode::ClosedForm,
            fallback: false,
            theta_null: 0.0,
            fit_components: default_fit_components(),
        }
    }
}

/// p-values of the local test at every point of `t_subset`, one row per replicate.
pub fn local_pvalues(
    config: &SimConfig,
    t_subset: &[f64],
    reps: usize,
    opts: &LocalExperimentOptions,
) -> Result<Vec<Vec<f64>>> {
    let cfg = config.with_grid(t_subset.to_vec());
    cfg.validate()?;
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let (grid, _) = generate_grid(&cfg, rep)?;
            (0..t_subset.len())
                .map(|j| {
                    let (ds, _) = grid.dataset_at(j)?;
                    let ds = ds.with_components(&opts.fit_components)?;
                    let r = if opts.fallback {
                        nuisance_fallback(&ds, opts.theta_null, opts.mode, FALLBACK_LEVEL)?
                    } else {
                        local_test(&ds, opts.theta_null, opts.mode)?
                    };
                    Ok(r.p_value)
                })
                .collect()
        })
        .collect()
}

fn rejection_rows(t_subset: &[f64], pvals: &[Vec<f64>], level: f64) -> Vec<ExperimentRow> {
    if pvals.is_empty() {
        return Vec::new();
    }
    t_subset
        .iter()
        .enumerate()
        .map(|(j, &t)| rate_row(t, None, pvals.iter().filter(|p| p[j] < level).count(), pvals.len()))
        .collect()
}

/// Per-t rejection rate under a null configuration.
pub fn run_type1_experiment(
    config: &SimConfig,
    t_subset: &[f64],
    reps: usize,
    opts: &LocalExperimentOptions,
) -> Result<Vec<ExperimentRow>> {
    let tested = *opts.fit_components.first().ok_or_else(|| Error::InvalidInput("no fitted components".into()))?;
    for &t in t_subset {
        let truth = config.theta_at(t)[tested];
        if (truth - opts.theta_null).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "configuration is not null at t = {t}: tested component is {truth}"
            )));
        }
    }
    let p = local_pvalues(config, t_subset, reps, opts)?;
    Ok(rejection_rows(t_subset, &p, opts.level))
}

/// Per-t rejection rate under an arbitrary configuration.
pub fn run_power_experiment(
    config: &SimConfig,
    t_subset: &[f64],
    reps: usize,
    opts: &LocalExperimentOptions,
) -> Result<Vec<ExperimentRow>> {
    let p = local_pvalues(config, t_subset, reps, opts)?;
    Ok(rejection_rows(t_subset, &p, opts.level))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalExperimentOptions {
    pub level: f64,
    #[serde(rename = "G")]
    pub g: usize,
    pub corrected: bool,
    /// Indices into `(A, C, E, noise)` of the fitted designs; the first is tested.
    pub fit_components: Vec<usize>,
}

impl Default for GlobalExperimentOptions {
    fn default() -> Self {
        Self { level: 0.05, g: 500, corrected: false, fit_components: default_fit_components() }
    }
}

fn multiplier_seed(config: &SimConfig, rep: u64) -> u64 {
    derive_seed(config.seed ^ 0x5151_5151_5151_5151, rep)
}

/// Global-test p-values for one configuration, one per replicate.
pub fn global_pvalues(config: &SimConfig, reps: usize, opts: &GlobalExperimentOptions) -> Result<Vec<f64>> {
    config.validate()?;
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let grid = generate_grid(config, rep)?.0.with_components(&opts.fit_components)?;
            let scores = grid_scores(&grid, 0.0)?;
            let r = global_test_from_scores(&scores, grid.n(), 0.0, opts.g, multiplier_seed(config, rep), opts.corrected)?;
            Ok(r.p_value)
        })
        .collect()
}

/// Rejection rate of the global test of `σ²_A ≡ 0` for each signal size `c₀`.
/// Replicate datasets share their random draws across `c₀`.
pub fn run_global_experiment(
    config: &SimConfig,
    c0_list: &[f64],
    reps: usize,
    opts: &GlobalExperimentOptions,
) -> Result<Vec<ExperimentRow>> {
    if reps == 0 {
        return Ok(Vec::new());
    }
    c0_list
        .iter()
        .map(|&c0| {
            let mut cfg = config.clone();
            cfg.variance.a.scale = cfg.variance.a.scale.with_value(c0);
            let p = global_pvalues(&cfg, reps, opts)?;
            Ok(rate_row(c0, None, p.iter().filter(|&&v| v < opts.level).count(), reps))
        })
        .collect()
}

/// Flag rate of every scan window.
pub fn run_scan_experiment(
    config: &SimConfig,
    lengths: &[usize],
    reps: usize,
    opts: &GlobalExperimentOptions,
) -> Result<Vec<ExperimentRow>> {
    config.validate()?;
    if reps == 0 {
        return Ok(Vec::new());
    }
    let flags: Vec<Vec<bool>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let grid = generate_grid(config, rep)?.0.with_components(&opts.fit_components)?;
            let scores = grid_scores(&grid, 0.0)?;
            let r = scan_from_scores(&scores, grid.n(), 0.0, lengths, opts.g, multiplier_seed(config, rep))?;
            Ok(r.windows.iter().map(|w| w.significant).collect())
        })
        .collect::<Result<_>>()?;
    let m = config.t_grid.len();
    let mut rows = Vec::new();
    let mut idx = 0;
    for &k in lengths {
        for start in 0..=m - k {
            let lo = config.t_grid[start];
            let hi = config.t_grid[start + k - 1];
            let hits = flags.iter().filter(|f| f[idx]).count();
            rows.push(rate_row(0.5 * (lo + hi), Some((k, lo, hi)), hits, reps));
            idx += 1;
        }
    }
    Ok(rows)
}
