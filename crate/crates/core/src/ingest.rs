//! Minute-level activity counts to per-day quantile profiles, per-t outlier
//! removal, and assembly into an outcome grid for twin families.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::{GridSubject, OutcomeGrid};
use crate::model::{build_twin_phis, TwinZygosity};

pub const MINUTES_PER_DAY: usize = 1440;
pub const DEFAULT_SCALE: f64 = 9250.0;
pub const DEFAULT_POINTS: usize = 144;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDayRecord {
    pub family_id: String,
    /// 1 or 2.
    pub member: u8,
    pub zygosity: TwinZygosity,
    pub day: u32,
    pub gender: f64,
    pub age: f64,
    pub bmi: f64,
    pub weekend: f64,
    pub counts: Vec<f64>,
}

impl RawDayRecord {
    pub fn label(&self) -> String {
        format!("family {} member {} day {}", self.family_id, self.member, self.day)
    }
}

/// `ln(scale·x + 1)` elementwise.
pub fn log_transform(counts: &[f64], scale: f64) -> Result<Vec<f64>> {
    if let Some(bad) = counts.iter().find(|v| !(**v >= 0.0) || v.is_infinite()) {
        return Err(Error::InvalidInput(format!("activity count {bad} is negative or not finite")));
    }
    Ok(counts.iter().map(|&x| (scale * x).ln_1p()).collect())
}

/// Order statistics at indices `(len/points)·k`, `k = 1..points` (one-based).
pub fn day_quantiles(values: &[f64], points: usize) -> Result<Vec<f64>> {
    if points == 0 || values.len() % points != 0 || values.is_empty() {
        return Err(Error::Dimension(format!(
            "{} values cannot be split into {points} quantile points",
            values.len()
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in day record".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let step = values.len() / points;
    Ok((1..=points).map(|k| sorted[k * step - 1]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierRule {
    /// Outside `[Q1 − 1.5·IQR, Q3 + 1.5·IQR]`, quartiles as Tukey hinges.
    #[default]
    Iqr15,
    /// Farther than three sample standard deviations from the median.
    Sd3med,
}

impl std::str::FromStr for OutlierRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iqr15" => Ok(OutlierRule::Iqr15),
            "sd3med" => Ok(OutlierRule::Sd3med),
            other => Err(Error::Parse(format!("unknown outlier rule '{other}'"))),
        }
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Lower and upper hinges: medians of the halves, excluding the median for odd counts.
pub fn tukey_hinges(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let half = n / 2;
    let lower = &v[..half];
    let upper = &v[n - half..];
    (median_sorted(lower), median_sorted(upper))
}

/// Keep-mask for one grid point; NaN entries are ignored in the fences and reported as dropped.
pub fn outlier_filter(values: &[f64], rule: OutlierRule) -> Result<Vec<bool>> {
    let present: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if present.len() < 4 {
        return Err(Error::InvalidInput(format!("outlier rule needs at least 4 values, got {}", present.len())));
    }
    let (lo, hi) = match rule {
        OutlierRule::Iqr15 => {
            let (q1, q3) = tukey_hinges(&present);
            let iqr = q3 - q1;
            if iqr == 0.0 {
                return Ok(values.iter().map(|v| !v.is_nan()).collect());
            }
            (q1 - 1.5 * iqr, q3 + 1.5 * iqr)
        }
        OutlierRule::Sd3med => {
            let n = present.len() as f64;
            let mean = present.iter().sum::<f64>() / n;
            let sd = (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if sd == 0.0 {
                return Ok(values.iter().map(|v| !v.is_nan()).collect());
            }
            let mut sorted = present.clone();
            sorted.sort_by(f64::total_cmp);
            let med = median_sorted(&sorted);
            (med - 3.0 * sd, med + 3.0 * sd)
        }
    };
    Ok(values.iter().map(|&v| !v.is_nan() && v >= lo && v <= hi).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub scale: f64,
    pub points: usize,
    pub rule: OutlierRule,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { scale: DEFAULT_SCALE, points: DEFAULT_POINTS, rule: OutlierRule::Iqr15 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub families: usize,
    pub monozygotic: usize,
    pub dizygotic: usize,
    /// Day records that entered the grid.
    pub observations: usize,
    /// Observations removed as outliers, per grid point.
    pub removed_per_t: Vec<usize>,
    pub excluded_families: Vec<String>,
}

impl IngestReport {
    pub fn summary(&self) -> String {
        format!(
            "{} families ({} MZ + {} DZ), {} observations",
            self.families, self.monozygotic, self.dizygotic, self.observations
        )
    }
}

/// Transforms, summarises and filters the records, then builds the grid.
/// Families need both members; each family is one subject with the two
/// members' days stacked and covariates `(1, gender, age, bmi, weekend)`.
pub fn assemble_grid(records: &[RawDayRecord], config: &IngestConfig) -> Result<(Option<OutcomeGrid>, IngestReport)> {
    let mut report = IngestReport::default();
    let mut by_family: BTreeMap<&str, Vec<&RawDayRecord>> = BTreeMap::new();
    for r in records {
        if r.member != 1 && r.member != 2 {
            return Err(Error::InvalidInput(format!("{}: member must be 1 or 2", r.label())));
        }
        if r.counts.len() != MINUTES_PER_DAY {
            return Err(Error::Dimension(format!(
                "{}: {} minute counts, expected {MINUTES_PER_DAY}",
                r.label(),
                r.counts.len()
            )));
        }
        by_family.entry(r.family_id.as_str()).or_default().push(r);
    }
    let mut families = Vec::new();
    for (id, mut recs) in by_family {
        recs.sort_by_key(|r| (r.member, r.day));
        let zyg = recs[0].zygosity;
        if recs.iter().any(|r| r.zygosity != zyg) {
            return Err(Error::InvalidInput(format!("family {id}: inconsistent zygosity")));
        }
        let n1 = recs.iter().filter(|r| r.member == 1).count();
        let n2 = recs.len() - n1;
        if n1 == 0 || n2 == 0 {
            report.excluded_families.push(id.to_string());
            continue;
        }
        let profiles = recs
            .iter()
            .map(|r| {
                let logged = log_transform(&r.counts, config.scale).map_err(|e| Error::InvalidInput(format!("{}: {e}", r.label())))?;
                day_quantiles(&logged, config.points)
            })
            .collect::<Result<Vec<_>>>()?;
        families.push((id.to_string(), zyg, n1, n2, recs, profiles));
    }
    let m = config.points;
    report.removed_per_t = vec![0; m];
    if families.is_empty() {
        return Ok((None, report));
    }
    let mut ys: Vec<DMatrix<f64>> = families
        .iter()
        .map(|f| DMatrix::from_fn(f.2 + f.3, m, |r, c| f.5[r][c]))
        .collect();
    for j in 0..m {
        let column: Vec<f64> = ys.iter().flat_map(|y| y.column(j).iter().copied().collect::<Vec<_>>()).collect();
        if column.len() < 4 {
            continue;
        }
        let keep = outlier_filter(&column, config.rule)?;
        let mut k = 0;
        for y in ys.iter_mut() {
            for r in 0..y.nrows() {
                if !keep[k] {
                    y[(r, j)] = f64::NAN;
                    report.removed_per_t[j] += 1;
                }
                k += 1;
            }
        }
    }
    let mut subjects = Vec::with_capacity(families.len());
    for ((id, zyg, n1, n2, recs, _), y) in families.into_iter().zip(ys) {
        let x = DMatrix::from_fn(n1 + n2, 5, |r, c| match c {
            0 => 1.0,
            1 => recs[r].gender,
            2 => recs[r].age,
            3 => recs[r].bmi,
            _ => recs[r].weekend,
        });
        report.families += 1;
        match zyg {
            TwinZygosity::Monozygotic => report.monozygotic += 1,
            TwinZygosity::Dizygotic => report.dizygotic += 1,
        }
        report.observations += n1 + n2;
        subjects.push(GridSubject { id, x, phi: build_twin_phis(n1, n2, zyg)?.to_vec(), y });
    }
    let t: Vec<f64> = (1..=m).map(|k| k as f64 / m as f64).collect();
    Ok((Some(OutcomeGrid::new(t, subjects)?), report))
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse(format!("line {line}: cannot parse {what} '{field}'")))
}

/// Reads wide records (`family_id, member, zygosity, day, gender, age, bmi,
/// weekend, m0001..m1440`) or long records (`..., weekend, minute, count`).
pub fn read_records<R: Read>(reader: R) -> Result<Vec<RawDayRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["family_id", "member", "zygosity", "day", "gender", "age", "bmi", "weekend"];
    for (k, name) in expected.iter().enumerate() {
        if headers.get(k) != Some(name) {
            return Err(Error::Parse(format!("column {} must be '{name}'", k + 1)));
        }
    }
    let long = headers.len() == 10 && headers.get(8) == Some("minute") && headers.get(9) == Some("count");
    if !long && headers.len() != expected.len() + MINUTES_PER_DAY {
        return Err(Error::Parse(format!(
            "expected {} columns (wide) or minute,count columns (long), found {}",
            expected.len() + MINUTES_PER_DAY,
            headers.len()
        )));
    }
    let mut out: Vec<RawDayRecord> = Vec::new();
    let mut index: BTreeMap<(String, u8, u32), usize> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let family_id = rec[0].to_string();
        let member: u8 = rec[1].parse().map_err(|_| Error::Parse(format!("line {line}: bad member '{}'", &rec[1])))?;
        let zygosity = TwinZygosity::parse(&rec[2])?;
        let day: u32 = rec[3].parse().map_err(|_| Error::Parse(format!("line {line}: bad day '{}'", &rec[3])))?;
        let covs = [
            parse_f64(&rec[4], "gender", line)?,
            parse_f64(&rec[5], "age", line)?,
            parse_f64(&rec[6], "bmi", line)?,
            parse_f64(&rec[7], "weekend", line)?,
        ];
        let make = |counts| RawDayRecord {
            family_id: family_id.clone(),
            member,
            zygosity,
            day,
            gender: covs[0],
            age: covs[1],
            bmi: covs[2],
            weekend: covs[3],
            counts,
        };
        if long {
            let minute: usize = rec[8].parse().map_err(|_| Error::Parse(format!("line {line}: bad minute '{}'", &rec[8])))?;
            if minute == 0 || minute > MINUTES_PER_DAY {
                return Err(Error::Parse(format!("line {line}: minute {minute} outside 1..=1440")));
            }
            let count = parse_f64(&rec[9], "count", line)?;
            let key = (family_id.clone(), member, day);
            let slot = *index.entry(key).or_insert_with(|| {
                out.push(make(vec![f64::NAN; MINUTES_PER_DAY]));
                out.len() - 1
            });
            out[slot].counts[minute - 1] = count;
        } else {
            let counts = (8..rec.len()).map(|k| parse_f64(&rec[k], "count", line)).collect::<Result<Vec<_>>>()?;
            out.push(make(counts));
        }
    }
    if let Some(r) = out.iter().find(|r| r.counts.iter().any(|v| v.is_nan())) {
        return Err(Error::Parse(format!("{}: missing minutes in long input", r.label())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_transform_values() {
        let v = log_transform(&[0.0, 1.0], DEFAULT_SCALE).unwrap();
        assert_eq!(v[0], 0.0);
        assert_relative_eq!(v[1], 9.13249, epsilon = 1e-5);
        assert!(log_transform(&[-1.0], DEFAULT_SCALE).is_err());
    }

    #[test]
    fn quantiles_of_a_ramp() {
        let ramp: Vec<f64> = (1..=1440).map(f64::from).collect();
        let q = day_quantiles(&ramp, 144).unwrap();
        for (k, v) in q.iter().enumerate() {
            assert_eq!(*v, 10.0 * (k + 1) as f64);
        }
        let mut rev = ramp.clone();
        rev.reverse();
        assert_eq!(day_quantiles(&rev, 144).unwrap(), q);
        assert_eq!(day_quantiles(&[2.5; 1440], 144).unwrap(), vec![2.5; 144]);
        assert!(day_quantiles(&ramp[..1000], 144).is_err());
    }

    #[test]
    fn transform_and_quantiles_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let counts: Vec<f64> = (0..1440).map(|_| rng.random::<f64>() * 0.05).collect();
        let a = day_quantiles(&log_transform(&counts, DEFAULT_SCALE).unwrap(), 144).unwrap();
        let b = log_transform(&day_quantiles(&counts, 144).unwrap(), DEFAULT_SCALE).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hinges_for_hundred_and_one() {
        let mut v: Vec<f64> = (1..=100).map(f64::from).collect();
        v.push(1000.0);
        assert_eq!(tukey_hinges(&v), (25.5, 76.5));
        let keep = outlier_filter(&v, OutlierRule::Iqr15).unwrap();
        assert!(!keep[100]);
        assert!(keep[..100].iter().all(|&k| k));
    }

    #[test]
    fn constant_values_are_kept() {
        assert!(outlier_filter(&[3.0; 10], OutlierRule::Iqr15).unwrap().iter().all(|&k| k));
        assert!(outlier_filter(&[3.0; 10], OutlierRule::Sd3med).unwrap().iter().all(|&k| k));
        assert!(outlier_filter(&[1.0, 2.0], OutlierRule::Iqr15).is_err());
    }

    #[test]
    fn sd_rule_removes_a_far_point() {
        let mut v: Vec<f64> = (-20..=20).map(|k| k as f64 * 0.1).collect();
        v.push(40.0);
        let keep = outlier_filter(&v, OutlierRule::Sd3med).unwrap();
        assert!(!keep[v.len() - 1]);
        assert_eq!(keep.iter().filter(|&&k| !k).count(), 1);
    }

    fn record(fam: &str, member: u8, day: u32, zyg: TwinZygosity, rng: &mut ChaCha8Rng) -> RawDayRecord {
        RawDayRecord {
            family_id: fam.into(),
            member,
            zygosity: zyg,
            day,
            gender: f64::from(member - 1),
            age: 40.0 + rng.random::<f64>(),
            bmi: 25.0 + rng.random::<f64>(),
            weekend: f64::from(u8::from(day % 7 >= 5)),
            counts: (0..1440).map(|_| rng.random::<f64>() * 0.02).collect(),
        }
    }

    #[test]
    fn one_family_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs: Vec<_> = (1..=2)
            .flat_map(|m| (0..3).map(move |d| (m, d)))
            .map(|(m, d)| record("f1", m, d, TwinZygosity::Monozygotic, &mut rng))
            .collect();
        let (grid, report) = assemble_grid(&recs, &IngestConfig::default()).unwrap();
        let grid = grid.unwrap();
        assert_eq!(grid.n(), 1);
        assert_eq!(grid.subjects()[0].x.nrows(), 6);
        assert_eq!(report.summary(), "1 families (1 MZ + 0 DZ), 6 observations");
    }

    #[test]
    fn empty_and_single_member_inputs() {
        let (grid, report) = assemble_grid(&[], &IngestConfig::default()).unwrap();
        assert!(grid.is_none());
        assert_eq!(report.families, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs = vec![
            record("a", 1, 0, TwinZygosity::Dizygotic, &mut rng),
            record("a", 2, 0, TwinZygosity::Dizygotic, &mut rng),
            record("b", 1, 0, TwinZygosity::Dizygotic, &mut rng),
        ];
        let (grid, report) = assemble_grid(&recs, &IngestConfig::default()).unwrap();
        assert_eq!(grid.unwrap().n(), 1);
        assert_eq!(report.excluded_families, vec!["b".to_string()]);
    }

    #[test]
    fn wide_and_long_csv_agree() {
        let head = "family_id,member,zygosity,day,gender,age,bmi,weekend";
        let mut wide = String::from(head);
        for k in 1..=1440 {
            wide.push_str(&format!(",m{k:04}"));
        }
        wide.push('\n');
        wide.push_str("f1,1,mz,0,1,30,22,0");
        for k in 1..=1440 {
            wide.push_str(&format!(",{}", (k % 7) as f64 * 0.01));
        }
        wide.push('\n');
        let mut long = format!("{head},minute,count\n");
        for k in 1..=1440 {
            long.push_str(&format!("f1,1,mz,0,1,30,22,0,{k},{}\n", (k % 7) as f64 * 0.01));
        }
        let a = read_records(wide.as_bytes()).unwrap();
        let b = read_records(long.as_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].zygosity, TwinZygosity::Monozygotic);
    }
}
