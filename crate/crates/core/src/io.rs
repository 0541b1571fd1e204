//! JSON and CSV interchange for datasets and outcome grids.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::{GridSubject, OutcomeGrid};
use crate::model::{build_twin_phis, ModelDataset, SubjectBlock, TwinZygosity};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub id: String,
    pub y: Vec<f64>,
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    #[serde(rename = "Phi")]
    pub phi: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub subjects: Vec<SubjectRecord>,
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols_if_empty: usize, what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(ncols_if_empty, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl SubjectRecord {
    /// Conversion without dimension checks, so that validation can report them.
    pub fn to_block(&self) -> Result<SubjectBlock> {
        let x = matrix_from_rows(&self.x, 0, &format!("subject {} X", self.id))?;
        let phi = self
            .phi
            .iter()
            .enumerate()
            .map(|(q, m)| matrix_from_rows(m, 0, &format!("subject {} Phi[{q}]", self.id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SubjectBlock::new(self.id.clone(), DVector::from_vec(self.y.clone()), x, phi))
    }

    pub fn from_block(b: &SubjectBlock) -> Self {
        Self {
            id: b.id.clone(),
            y: b.y.iter().copied().collect(),
            x: rows_of(&b.x),
            phi: b.phi.iter().map(rows_of).collect(),
        }
    }
}

impl DatasetRecord {
    pub fn to_blocks(&self) -> Result<Vec<SubjectBlock>> {
        self.subjects.iter().map(SubjectRecord::to_block).collect()
    }

    pub fn to_dataset(&self) -> Result<ModelDataset> {
        ModelDataset::new(self.to_blocks()?)
    }

    pub fn from_dataset(ds: &ModelDataset) -> Self {
        Self { subjects: ds.subjects().iter().map(SubjectRecord::from_block).collect() }
    }
}

pub fn parse_dataset_json(text: &str) -> Result<DatasetRecord> {
    Ok(serde_json::from_str(text)?)
}

pub fn dataset_to_json(ds: &ModelDataset) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&DatasetRecord::from_dataset(ds))?;
    s.push('\n');
    Ok(s)
}

/// Reads `family_id, member, zygosity, y, x1, …, xp` rows; each family
/// becomes one subject with twin variance designs.
pub fn read_twin_csv<R: Read>(reader: R) -> Result<Vec<SubjectBlock>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let fixed = ["family_id", "member", "zygosity", "y"];
    for (k, name) in fixed.iter().enumerate() {
        if headers.get(k) != Some(name) {
            return Err(Error::Parse(format!("column {} must be '{name}'", k + 1)));
        }
    }
    let p = headers.len() - fixed.len();
    if p == 0 {
        return Err(Error::Parse("no covariate columns".into()));
    }
    struct Rows {
        zyg: TwinZygosity,
        members: Vec<(u8, f64, Vec<f64>)>,
    }
    let mut families: BTreeMap<String, Rows> = BTreeMap::new();
    let mut order = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse::<f64>().map_err(|_| Error::Parse(format!("line {line}: cannot parse '{}'", &rec[k])))
        };
        let member: u8 = rec[1].parse().map_err(|_| Error::Parse(format!("line {line}: bad member '{}'", &rec[1])))?;
        if member != 1 && member != 2 {
            return Err(Error::Parse(format!("line {line}: member must be 1 or 2")));
        }
        let zyg = TwinZygosity::parse(&rec[2])?;
        let y = num(3)?;
        let x = (4..4 + p).map(num).collect::<Result<Vec<_>>>()?;
        let id = rec[0].to_string();
        let entry = families.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Rows { zyg, members: Vec::new() }
        });
        if entry.zyg != zyg {
            return Err(Error::Parse(format!("line {line}: family {id} has inconsistent zygosity")));
        }
        entry.members.push((member, y, x));
    }
    order
        .into_iter()
        .map(|id| {
            let mut f = families.remove(&id).expect("family recorded in order");
            f.members.sort_by_key(|m| m.0);
            let n1 = f.members.iter().filter(|m| m.0 == 1).count();
            let n2 = f.members.len() - n1;
            let phi = build_twin_phis(n1, n2, f.zyg)
                .map_err(|_| Error::Parse(format!("family {id} needs measures for both members")))?;
            let y = DVector::from_iterator(f.members.len(), f.members.iter().map(|m| m.1));
            let x = DMatrix::from_fn(f.members.len(), p, |r, c| f.members[r].2[c]);
            Ok(SubjectBlock::new(id, y, x, phi.to_vec()))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSubjectRecord {
    pub id: String,
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    #[serde(rename = "Phi")]
    pub phi: Vec<Vec<Vec<f64>>>,
    /// `n_i × m`; null marks a missing value.
    #[serde(rename = "Y")]
    pub y: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecord {
    /// Provenance of generated grids; ignored when reading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub t_values: Vec<f64>,
    pub subjects: Vec<GridSubjectRecord>,
}

impl GridRecord {
    pub fn from_grid(grid: &OutcomeGrid) -> Self {
        Self {
            config: None,
            t_values: grid.t_values().to_vec(),
            subjects: grid
                .subjects()
                .iter()
                .map(|s| GridSubjectRecord {
                    id: s.id.clone(),
                    x: rows_of(&s.x),
                    phi: s.phi.iter().map(rows_of).collect(),
                    y: s.y.row_iter().map(|r| r.iter().map(|v| (!v.is_nan()).then_some(*v)).collect()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_grid(&self) -> Result<OutcomeGrid> {
        let m = self.t_values.len();
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let x = matrix_from_rows(&s.x, 0, &format!("subject {} X", s.id))?;
                let phi = s
                    .phi
                    .iter()
                    .map(|p| matrix_from_rows(p, 0, &format!("subject {} Phi", s.id)))
                    .collect::<Result<Vec<_>>>()?;
                if s.y.iter().any(|r| r.len() != m) {
                    return Err(Error::Dimension(format!("subject {}: every Y row needs {m} entries", s.id)));
                }
                let y = DMatrix::from_fn(s.y.len(), m, |r, c| s.y[r][c].unwrap_or(f64::NAN));
                Ok(GridSubject { id: s.id.clone(), x, phi, y })
            })
            .collect::<Result<Vec<_>>>()?;
        OutcomeGrid::new(self.t_values.clone(), subjects)
    }
}

pub fn parse_grid_json(text: &str) -> Result<OutcomeGrid> {
    serde_json::from_str::<GridRecord>(text)?.to_grid()
}

pub fn grid_to_json(grid: &OutcomeGrid) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&GridRecord::from_grid(grid))?;
    s.push('\n');
    Ok(s)
}
