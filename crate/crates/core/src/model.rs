//! Clustered mixed-model data and twin-design variance structures.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cluster: response, fixed-effect design and the `d` variance designs.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBlock {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub phi: Vec<DMatrix<f64>>,
}

impl SubjectBlock {
    pub fn new(id: impl Into<String>, y: DVector<f64>, x: DMatrix<f64>, phi: Vec<DMatrix<f64>>) -> Self {
        Self { id: id.into(), y, x, phi }
    }

    /// Number of repeated measures.
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// Checks that `y`, `X` and every `Φ` agree on the number of measures.
    pub fn check_dimensions(&self) -> Result<()> {
        let ni = self.y.len();
        if ni == 0 {
            return Err(Error::Dimension(format!("subject {}: no observations", self.id)));
        }
        if self.x.nrows() != ni {
            return Err(Error::Dimension(format!(
                "subject {}: X has {} rows but y has {} entries",
                self.id,
                self.x.nrows(),
                ni
            )));
        }
        if self.phi.is_empty() {
            return Err(Error::Dimension(format!("subject {}: no variance designs", self.id)));
        }
        for (q, phi) in self.phi.iter().enumerate() {
            if phi.nrows() != ni || phi.ncols() != ni {
                return Err(Error::Dimension(format!(
                    "subject {}: Phi[{}] is {}x{}, expected {}x{}",
                    self.id,
                    q,
                    phi.nrows(),
                    phi.ncols(),
                    ni,
                    ni
                )));
            }
        }
        Ok(())
    }

    /// Restricts the block to the measurement indices in `keep`.
    pub fn select_rows(&self, keep: &[usize]) -> SubjectBlock {
        let y = DVector::from_iterator(keep.len(), keep.iter().map(|&j| self.y[j]));
        let x = self.x.select_rows(keep);
        let phi = self
            .phi
            .iter()
            .map(|m| m.select_rows(keep).select_columns(keep))
            .collect();
        SubjectBlock { id: self.id.clone(), y, x, phi }
    }
}

/// A collection of subjects sharing `d` variance components and `p` fixed effects.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDataset {
    subjects: Vec<SubjectBlock>,
    d: usize,
    p: usize,
}

impl ModelDataset {
    /// Builds a dataset, enforcing consistent dimensions, `n ≥ d` and `n > p`.
    pub fn new(subjects: Vec<SubjectBlock>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset has no subjects".into()))?;
        let d = first.phi.len();
        let p = first.x.ncols();
        for s in &subjects {
            s.check_dimensions()?;
            if s.phi.len() != d {
                return Err(Error::Dimension(format!(
                    "subject {} has {} variance designs, expected {}",
                    s.id,
                    s.phi.len(),
                    d
                )));
            }
            if s.x.ncols() != p {
                return Err(Error::Dimension(format!(
                    "subject {} has {} fixed-effect columns, expected {}",
                    s.id,
                    s.x.ncols(),
                    p
                )));
            }
        }
        let n = subjects.len();
        if n < d {
            return Err(Error::InvalidInput(format!("{n} subjects cannot identify {d} variance components")));
        }
        if n <= p {
            return Err(Error::InvalidInput(format!("{n} subjects cannot identify {p} fixed effects")));
        }
        Ok(Self { subjects, d, p })
    }

    pub fn subjects(&self) -> &[SubjectBlock] {
        &self.subjects
    }

    pub fn into_subjects(self) -> Vec<SubjectBlock> {
        self.subjects
    }

    /// Number of subjects.
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Number of variance components.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of fixed effects.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Total number of measurements across subjects.
    pub fn n_total(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    /// Returns a dataset keeping only the variance designs listed in `components`, in that order.
    pub fn with_components(&self, components: &[usize]) -> Result<Self> {
        if components.iter().any(|&q| q >= self.d) {
            return Err(Error::Dimension(format!("component index out of range (d = {})", self.d)));
        }
        let subjects = self
            .subjects
            .iter()
            .map(|s| SubjectBlock {
                id: s.id.clone(),
                y: s.y.clone(),
                x: s.x.clone(),
                phi: components.iter().map(|&q| s.phi[q].clone()).collect(),
            })
            .collect();
        Self::new(subjects)
    }

    /// Replaces every response vector, keeping designs fixed.
    pub fn with_responses(&self, responses: Vec<DVector<f64>>) -> Result<Self> {
        if responses.len() != self.n() {
            return Err(Error::Dimension("one response vector per subject required".into()));
        }
        let subjects = self
            .subjects
            .iter()
            .zip(responses)
            .map(|(s, y)| SubjectBlock { id: s.id.clone(), y, x: s.x.clone(), phi: s.phi.clone() })
            .collect();
        Self::new(subjects)
    }
}

/// Variance components `θ`; the first entry is the component under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    pub values: Vec<f64>,
}

impl ThetaVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The tested component `θ₁`.
    pub fn tested(&self) -> f64 {
        self.values[0]
    }

    /// The nuisance components `θ₂..θ_d`.
    pub fn nuisance(&self) -> &[f64] {
        &self.values[1..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwinZygosity {
    Monozygotic,
    Dizygotic,
}

impl TwinZygosity {
    /// Genetic similarity between the two twins.
    pub fn kinship(self) -> f64 {
        match self {
            TwinZygosity::Monozygotic => 1.0,
            TwinZygosity::Dizygotic => 0.5,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mz" | "monozygotic" => Ok(TwinZygosity::Monozygotic),
            "dz" | "dizygotic" => Ok(TwinZygosity::Dizygotic),
            other => Err(Error::Parse(format!("unknown zygosity '{other}'"))),
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            TwinZygosity::Monozygotic => "MZ",
            TwinZygosity::Dizygotic => "DZ",
        }
    }
}

/// Variance designs of a twin family with `n1` and `n2` measures per twin:
/// additive genetic `T K Tᵀ`, common environment `T Λ Tᵀ`, unique environment
/// `T Tᵀ` and measurement noise `I`, with `T = blkdiag(1_{n1}, 1_{n2})`.
pub fn build_twin_phis(n1: usize, n2: usize, zygosity: TwinZygosity) -> Result<[DMatrix<f64>; 4]> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidInput("each twin needs at least one measure".into()));
    }
    let n = n1 + n2;
    let member = |j: usize| usize::from(j >= n1);
    let kin = zygosity.kinship();
    let genetic = DMatrix::from_fn(n, n, |a, b| if member(a) == member(b) { 1.0 } else { kin });
    let common = DMatrix::from_element(n, n, 1.0);
    let unique = DMatrix::from_fn(n, n, |a, b| if member(a) == member(b) { 1.0 } else { 0.0 });
    let noise = DMatrix::identity(n, n);
    Ok([genetic, common, unique, noise])
}

/// `H_i(θ) = Σ_q θ_q Φ_iq`.
pub fn covariance_at(subject: &SubjectBlock, theta: &ThetaVector) -> Result<DMatrix<f64>> {
    if theta.len() != subject.phi.len() {
        return Err(Error::Dimension(format!(
            "theta has {} entries but subject {} has {} variance designs",
            theta.len(),
            subject.id,
            subject.phi.len()
        )));
    }
    let ni = subject.n_obs();
    let mut h = DMatrix::zeros(ni, ni);
    for (phi, &w) in subject.phi.iter().zip(&theta.values) {
        h += phi * w;
    }
    Ok(h)
}

/// Frobenius inner product `⟨A, B⟩ = tr(AᵀB)`.
pub fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
