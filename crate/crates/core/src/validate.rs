//! Structural checks on raw subject blocks before any fitting.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::Error;
use crate::estimation::{DesignGram, LeastSquares};
use crate::model::{ModelDataset, SubjectBlock};

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    /// Zero-based variance-design index.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    fn push(&mut self, severity: Severity, subject: Option<&str>, component: Option<usize>, message: String) {
        self.issues.push(ValidationIssue { severity, subject: subject.map(str::to_owned), component, message });
    }
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    (m - m.transpose()).abs().max() / scale
}

pub fn validate_dataset(dataset: &ModelDataset) -> ValidationReport {
    validate_subjects(dataset.subjects())
}

pub fn validate_subjects(subjects: &[SubjectBlock]) -> ValidationReport {
    let mut report = ValidationReport::default();
    if subjects.is_empty() {
        report.push(Severity::Error, None, None, "dataset has no subjects".into());
        return report;
    }
    let p = subjects[0].x.ncols();
    let d = subjects[0].phi.len();
    let mut structural_ok = true;
    for s in subjects {
        let id = Some(s.id.as_str());
        if let Err(e) = s.check_dimensions() {
            report.push(Severity::Error, id, None, e.to_string());
            structural_ok = false;
            continue;
        }
        if s.x.ncols() != p {
            report.push(Severity::Error, id, None, format!("X has {} columns, expected {p}", s.x.ncols()));
            structural_ok = false;
        }
        if s.phi.len() != d {
            report.push(Severity::Error, id, None, format!("{} variance designs, expected {d}", s.phi.len()));
            structural_ok = false;
            continue;
        }
        if s.y.iter().chain(s.x.iter()).chain(s.phi.iter().flat_map(|m| m.iter())).any(|v| !v.is_finite()) {
            report.push(Severity::Error, id, None, "non-finite entries".into());
            structural_ok = false;
            continue;
        }
        for (q, phi) in s.phi.iter().enumerate() {
            let asym = asymmetry(phi);
            if asym > SYMMETRY_TOL {
                report.push(
                    Severity::Error,
                    id,
                    Some(q),
                    format!("Phi[{q}] is asymmetric (relative deviation {asym:.3e})"),
                );
                structural_ok = false;
                continue;
            }
            let min_eig = SymmetricEigen::new(phi.clone()).eigenvalues.min();
            if min_eig < -PSD_TOL * phi.norm() {
                report.push(
                    Severity::Error,
                    id,
                    Some(q),
                    format!("Phi[{q}] is not positive semidefinite (min eigenvalue {min_eig:.3e})"),
                );
                structural_ok = false;
            }
        }
        for a in 0..d {
            for b in a + 1..d {
                if s.phi[a] == s.phi[b] {
                    report.push(
                        Severity::Warning,
                        id,
                        Some(b),
                        format!("Phi[{a}] and Phi[{b}] coincide for this subject"),
                    );
                }
            }
        }
    }
    if !structural_ok {
        return report;
    }
    let n = subjects.len();
    if n < d {
        report.push(Severity::Error, None, None, format!("{n} subjects cannot identify {d} variance components"));
    }
    if n <= p {
        report.push(Severity::Error, None, None, format!("{n} subjects but {p} fixed effects"));
    }
    match LeastSquares::new(subjects) {
        Err(Error::RankDeficient { columns }) => report.push(
            Severity::Error,
            None,
            None,
            format!("stacked X is rank deficient in columns {columns:?}"),
        ),
        Err(e) => report.push(Severity::Error, None, None, e.to_string()),
        Ok(_) => {}
    }
    match DesignGram::new(subjects) {
        Err(Error::SingularGram { condition }) => report.push(
            Severity::Error,
            None,
            None,
            format!("Xi singular (condition number {condition:.3e})"),
        ),
        Err(e) => report.push(Severity::Error, None, None, format!("Xi singular: {e}")),
        Ok(_) => {}
    }
    report
}
