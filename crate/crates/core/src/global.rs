//! Maximally selected local statistic over a grid of correlated outcomes,
//! with a multiplier-perturbation null distribution and an interval scan.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{fit_with, residual_traces, DesignGram, LeastSquares};
use crate::local_test::{closed_form_statistic, scores_from_traces};
use crate::model::{ModelDataset, SubjectBlock};
use crate::rng::stream;

/// One subject observed at every grid point; `y` is `n_i × m`, NaN marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSubject {
    pub id: String,
    pub x: DMatrix<f64>,
    pub phi: Vec<DMatrix<f64>>,
    pub y: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeGrid {
    t_values: Vec<f64>,
    subjects: Vec<GridSubject>,
}

impl OutcomeGrid {
    pub fn new(t_values: Vec<f64>, subjects: Vec<GridSubject>) -> Result<Self> {
        if t_values.is_empty() {
            return Err(Error::InvalidInput("grid needs at least one t value".into()));
        }
        if t_values.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidInput("t values must lie in [0, 1]".into()));
        }
        if t_values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("t values must be strictly increasing".into()));
        }
        let m = t_values.len();
        let (p, d) = match subjects.first() {
            Some(s) => (s.x.ncols(), s.phi.len()),
            None => return Err(Error::InvalidInput("grid has no subjects".into())),
        };
        for s in &subjects {
            let ni = s.x.nrows();
            if s.y.nrows() != ni || s.y.ncols() != m {
                return Err(Error::Dimension(format!(
                    "subject {}: responses are {}×{}, expected {ni}×{m}",
                    s.id,
                    s.y.nrows(),
                    s.y.ncols()
                )));
            }
            if s.x.ncols() != p || s.phi.len() != d {
                return Err(Error::Dimension(format!("subject {}: inconsistent p or d", s.id)));
            }
            if s.phi.iter().any(|f| f.nrows() != ni || f.ncols() != ni) {
                return Err(Error::Dimension(format!("subject {}: variance design has wrong size", s.id)));
            }
            if s.y.iter().any(|v| v.is_infinite()) {
                return Err(Error::InvalidInput(format!("subject {}: infinite response", s.id)));
            }
        }
        Ok(Self { t_values, subjects })
    }

    pub fn t_values(&self) -> &[f64] {
        &self.t_values
    }

    pub fn subjects(&self) -> &[GridSubject] {
        &self.subjects
    }

    pub fn m(&self) -> usize {
        self.t_values.len()
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn has_missing(&self, j: usize) -> bool {
        self.subjects.iter().any(|s| s.y.column(j).iter().any(|v| v.is_nan()))
    }

    /// Grid restricted to the given columns (kept in the given order).
    pub fn restrict(&self, columns: &[usize]) -> Result<Self> {
        let t = columns.iter().map(|&j| self.t_values[j]).collect();
        let subjects = self
            .subjects
            .iter()
            .map(|s| GridSubject { y: s.y.select_columns(columns), ..s.clone() })
            .collect();
        Self::new(t, subjects)
    }

    /// Grid keeping only the variance designs listed in `components`, in that order.
    pub fn with_components(&self, components: &[usize]) -> Result<Self> {
        let d = self.subjects[0].phi.len();
        if components.is_empty() || components.iter().any(|&q| q >= d) {
            return Err(Error::Dimension(format!("component indices {components:?} invalid for d = {d}")));
        }
        let subjects = self
            .subjects
            .iter()
            .map(|s| GridSubject { phi: components.iter().map(|&q| s.phi[q].clone()).collect(), ..s.clone() })
            .collect();
        Self::new(self.t_values.clone(), subjects)
    }

    /// Dataset at grid point `j` with missing observations removed, plus the
    /// index of every retained subject in the full grid.
    pub fn dataset_at(&self, j: usize) -> Result<(ModelDataset, Vec<usize>)> {
        let mut blocks = Vec::with_capacity(self.n());
        let mut members = Vec::with_capacity(self.n());
        for (i, s) in self.subjects.iter().enumerate() {
            let col = s.y.column(j);
            let keep: Vec<usize> = (0..col.len()).filter(|&r| !col[r].is_nan()).collect();
            if keep.is_empty() {
                continue;
            }
            let full = SubjectBlock::new(s.id.clone(), col.into_owned(), s.x.clone(), s.phi.clone());
            blocks.push(if keep.len() == col.len() { full } else { full.select_rows(&keep) });
            members.push(i);
        }
        Ok((ModelDataset::new(blocks)?, members))
    }
}

/// Scores at one grid point.
#[derive(Debug, Clone, Serialize)]
pub struct PointScores {
    pub t: f64,
    pub z: Vec<f64>,
    pub m: Vec<f64>,
    /// Index into the grid's subjects for each score.
    pub members: Vec<usize>,
    pub nu1sq: f64,
    pub sum_z: f64,
    pub statistic: f64,
    pub degenerate: bool,
}

fn point_scores(
    t: f64,
    subjects: &[SubjectBlock],
    members: Vec<usize>,
    ls: &LeastSquares,
    design: &DesignGram,
    theta_null: f64,
) -> PointScores {
    let fit = fit_with(ls, subjects);
    let traces: Vec<DVector<f64>> = subjects.iter().zip(&fit.residuals).map(|(s, r)| residual_traces(s, r)).collect();
    let scores = scores_from_traces(design, &traces, theta_null);
    let n = scores.n();
    let nu1sq = scores.m.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let sum_z = scores.sum_z();
    let statistic = closed_form_statistic(sum_z, nu1sq, n, theta_null == 0.0);
    PointScores { t, z: scores.z, m: scores.m, members, nu1sq, sum_z, statistic, degenerate: !(nu1sq > 0.0) }
}

/// Per-t scores; the least-squares factorisation and `Ξ` are shared across
/// every grid point without missing values.
pub fn grid_scores(grid: &OutcomeGrid, theta_null: f64) -> Result<Vec<PointScores>> {
    if !(theta_null >= 0.0) {
        return Err(Error::InvalidInput(format!("null value {theta_null} must be nonnegative")));
    }
    let base: Vec<SubjectBlock> = grid
        .subjects
        .iter()
        .map(|s| SubjectBlock::new(s.id.clone(), DVector::zeros(s.x.nrows()), s.x.clone(), s.phi.clone()))
        .collect();
    let shared = if (0..grid.m()).all(|j| grid.has_missing(j)) {
        None
    } else {
        ModelDataset::new(base.clone())?;
        Some((LeastSquares::new(&base)?, DesignGram::new(&base)?))
    };
    (0..grid.m())
        .into_par_iter()
        .map(|j| {
            let t = grid.t_values[j];
            let context = |e: Error| Error::InvalidInput(format!("at t = {t}: {e}"));
            match (&shared, grid.has_missing(j)) {
                (Some((ls, design)), false) => {
                    let subjects: Vec<SubjectBlock> = base
                        .iter()
                        .zip(&grid.subjects)
                        .map(|(b, s)| SubjectBlock { y: s.y.column(j).into_owned(), ..b.clone() })
                        .collect();
                    Ok(point_scores(t, &subjects, (0..grid.n()).collect(), ls, design, theta_null))
                }
                _ => {
                    let (ds, members) = grid.dataset_at(j).map_err(context)?;
                    let ls = LeastSquares::new(ds.subjects()).map_err(context)?;
                    let design = DesignGram::new(ds.subjects()).map_err(context)?;
                    Ok(point_scores(t, ds.subjects(), members, &ls, &design, theta_null))
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SCurve {
    pub t_values: Vec<f64>,
    pub s: Vec<f64>,
    pub degenerate: Vec<bool>,
}

pub fn s_curve(grid: &OutcomeGrid, theta_null: f64) -> Result<SCurve> {
    let scores = grid_scores(grid, theta_null)?;
    Ok(SCurve {
        t_values: scores.iter().map(|p| p.t).collect(),
        s: scores.iter().map(|p| p.statistic).collect(),
        degenerate: scores.iter().map(|p| p.degenerate).collect(),
    })
}

/// Standard-normal multipliers for replicate `g`, one per grid subject.
pub fn multipliers(seed: u64, g: usize, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, g as u64);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Perturbed curve `S⁽ᵍ⁾(t)` for one multiplier vector; the denominators are
/// the observed `ν̂²₁ₙ(t)`.
pub fn perturbed_curve(scores: &[PointScores], xi: &[f64], theta_null: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|p| {
            let num: f64 = p.m.iter().zip(&p.members).map(|(m, &i)| m * xi[i]).sum();
            closed_form_statistic(num, p.nu1sq, p.m.len(), theta_null == 0.0)
        })
        .collect()
}

/// `G × m` matrix of perturbed curves, one row per replicate.
pub fn replicate_curves(scores: &[PointScores], n: usize, theta_null: f64, g: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..g)
        .into_par_iter()
        .map(|r| perturbed_curve(scores, &multipliers(seed, r, n), theta_null))
        .collect()
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `Γ⁽¹⁾, …, Γ⁽ᴳ⁾`.
pub fn perturbation_replicates(grid: &OutcomeGrid, theta_null: f64, g: usize, seed: u64) -> Result<Vec<f64>> {
    if g == 0 {
        return Err(Error::InvalidInput("number of replicates must be positive".into()));
    }
    let scores = grid_scores(grid, theta_null)?;
    Ok(replicate_curves(&scores, grid.n(), theta_null, g, seed).into_iter().map(max_of).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalTestResult {
    pub theta_null: f64,
    pub t_values: Vec<f64>,
    #[serde(rename = "S_curve")]
    pub s_curve: Vec<f64>,
    #[serde(rename = "Gamma")]
    pub gamma: f64,
    pub argmax_t: f64,
    pub replicates: Vec<f64>,
    pub p_value: f64,
    #[serde(rename = "G")]
    pub g: usize,
    pub seed: u64,
    pub corrected: bool,
    pub degenerate: Vec<bool>,
}

/// Monte Carlo p-value `#{Γ⁽ᵍ⁾ > Γ} / G`, or `(1 + #) / (G + 1)` when corrected.
pub fn monte_carlo_pvalue(gamma: f64, replicates: &[f64], corrected: bool) -> f64 {
    let exceed = replicates.iter().filter(|&&r| r > gamma).count() as f64;
    let g = replicates.len() as f64;
    if corrected {
        (1.0 + exceed) / (g + 1.0)
    } else {
        exceed / g
    }
}

pub fn global_test_from_scores(
    scores: &[PointScores],
    n: usize,
    theta_null: f64,
    g: usize,
    seed: u64,
    corrected: bool,
) -> Result<GlobalTestResult> {
    if g == 0 {
        return Err(Error::InvalidInput("number of replicates must be positive".into()));
    }
    let s_curve: Vec<f64> = scores.iter().map(|p| p.statistic).collect();
    let (arg, gamma) = s_curve
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
    let replicates: Vec<f64> = replicate_curves(scores, n, theta_null, g, seed).into_iter().map(max_of).collect();
    Ok(GlobalTestResult {
        theta_null,
        t_values: scores.iter().map(|p| p.t).collect(),
        argmax_t: scores[arg].t,
        p_value: monte_carlo_pvalue(gamma, &replicates, corrected),
        s_curve,
        gamma,
        replicates,
        g,
        seed,
        corrected,
        degenerate: scores.iter().map(|p| p.degenerate).collect(),
    })
}

pub fn global_test(grid: &OutcomeGrid, theta_null: f64, g: usize, seed: u64) -> Result<GlobalTestResult> {
    let scores = grid_scores(grid, theta_null)?;
    global_test_from_scores(&scores, grid.n(), theta_null, g, seed, false)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanWindow {
    pub length: usize,
    pub start: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    #[serde(rename = "Gamma_L")]
    pub gamma: f64,
    pub replicate_mean: f64,
    pub replicate_sd: f64,
    pub h: f64,
    pub significant: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanResult {
    pub theta_null: f64,
    pub lengths: Vec<usize>,
    pub n_candidates: usize,
    pub threshold: f64,
    #[serde(rename = "G")]
    pub g: usize,
    pub seed: u64,
    pub windows: Vec<ScanWindow>,
}

impl ScanResult {
    pub fn significant(&self) -> impl Iterator<Item = &ScanWindow> {
        self.windows.iter().filter(|w| w.significant)
    }
}

/// Number of contiguous windows `|J| = Σ_k (m − k + 1)`.
pub fn candidate_count(m: usize, lengths: &[usize]) -> usize {
    lengths.iter().filter(|&&k| k >= 1 && k <= m).map(|&k| m - k + 1).sum()
}

/// `√(2 log |J|)`.
pub fn scan_threshold(m: usize, lengths: &[usize]) -> f64 {
    (2.0 * (candidate_count(m, lengths) as f64).ln()).sqrt()
}

pub fn scan_from_scores(
    scores: &[PointScores],
    n: usize,
    theta_null: f64,
    lengths: &[usize],
    g: usize,
    seed: u64,
) -> Result<ScanResult> {
    let m = scores.len();
    if g < 2 {
        return Err(Error::InvalidInput("the scan needs at least two replicates".into()));
    }
    if lengths.is_empty() || lengths.iter().any(|&k| k == 0 || k > m) {
        return Err(Error::InvalidInput(format!("window lengths {lengths:?} must lie in 1..={m}")));
    }
    let s: Vec<f64> = scores.iter().map(|p| p.statistic).collect();
    let reps = replicate_curves(scores, n, theta_null, g, seed);
    let threshold = scan_threshold(m, lengths);
    let mut windows = Vec::with_capacity(candidate_count(m, lengths));
    for &k in lengths {
        for start in 0..=m - k {
            let range = start..start + k;
            let gamma = max_of(s[range.clone()].iter().copied());
            let rep: Vec<f64> = reps.iter().map(|row| max_of(row[range.clone()].iter().copied())).collect();
            let mean = rep.iter().sum::<f64>() / g as f64;
            let var = rep.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (g - 1) as f64;
            let sd = var.sqrt();
            let degenerate = !(sd > 0.0);
            let h = if degenerate {
                if gamma > mean {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                (gamma - mean) / sd
            };
            windows.push(ScanWindow {
                length: k,
                start,
                t_lo: scores[start].t,
                t_hi: scores[start + k - 1].t,
                gamma,
                replicate_mean: mean,
                replicate_sd: sd,
                h,
                significant: h > threshold,
                degenerate,
            });
        }
    }
    Ok(ScanResult {
        theta_null,
        lengths: lengths.to_vec(),
        n_candidates: windows.len(),
        threshold,
        g,
        seed,
        windows,
    })
}

/// Interval scan of `H₀: θ₁(t) ≡ θ₁⁰` on every window of the given lengths.
pub fn scan(grid: &OutcomeGrid, theta_null: f64, lengths: &[usize], g: usize, seed: u64) -> Result<ScanResult> {
    let scores = grid_scores(grid, theta_null)?;
    scan_from_scores(&scores, grid.n(), theta_null, lengths, g, seed)
}
