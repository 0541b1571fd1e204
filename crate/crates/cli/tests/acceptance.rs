//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line; the
//! process exits nonzero if any criterion fails.

use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use elvc::distributions::chi2_1_cdf;
use elvc::el::solve_scalar_el;
use elvc::estimation::fit_least_squares;
use elvc::fixed_effects::{test_beta, FixedEffects, Weighting};
use elvc::global::{grid_scores, multipliers, scan_threshold};
use elvc::ingest::{day_quantiles, log_transform, DEFAULT_SCALE};
use elvc::local_test::{local_scores, local_test, TestMode};
use elvc::model::frobenius;
use elvc::sim::{
    generate_dataset, generate_grid, run_global_experiment, run_power_experiment, run_scan_experiment,
    default_fit_components, run_type1_experiment, Coupling, ErrorFamily, GlobalExperimentOptions, LocalExperimentOptions, SignalSpec,
    SimConfig, VarianceFunctionSpec,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    format!("error: {e}")
}

fn config(n_mz: usize, n_dz: usize, c_a: SignalSpec, t_grid: Vec<f64>) -> SimConfig {
    SimConfig {
        n_mz,
        n_dz,
        t_grid,
        variance: VarianceFunctionSpec::new(c_a, SignalSpec::constant(0.1), SignalSpec::constant(0.08)),
        ..SimConfig::default()
    }
}

/// The variance designs every simulation experiment fits.
fn fitted(ds: elvc::ModelDataset) -> Result<elvc::ModelDataset, String> {
    ds.with_components(&default_fit_components()).map_err(err)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn c1_score_sums() -> Outcome {
    let worst = (0..100u64)
        .into_par_iter()
        .map(|k| -> Result<f64, String> {
            let mut cfg = config(25, 25, SignalSpec::constant(0.05 * (k % 3) as f64), vec![0.25]);
            cfg.seed = 1000 + k;
            let ds = generate_dataset(&cfg, k, 0).map_err(err)?;
            let theta0 = if k % 2 == 0 { 0.0 } else { 0.1 };
            let s = local_scores(&ds, theta0).map_err(err)?;
            let sums = [s.z.iter().sum::<f64>(), s.d.iter().sum::<f64>(), s.m.iter().sum::<f64>()];
            let scale = sums.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let spread = sums.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - sums.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            Ok(spread / scale)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    check(worst < 1e-9, format!("max relative disagreement of score sums {worst:.3e} over 100 datasets"))
}

fn c2_el_dual() -> Outcome {
    let z = [3.0, -1.0, -1.0];
    let sol = solve_scalar_el(&z).map_err(err)?;
    let lam = sol.lambda[0];
    let mut ok = (lam - 1.0 / 9.0).abs() < 1e-6 && (sol.neg2logw - 0.104232).abs() < 1e-6;
    let mut worst: f64 = 0.0;
    for c in [0.1, 10.0] {
        let scaled: Vec<f64> = z.iter().map(|v| c * v).collect();
        let s = solve_scalar_el(&scaled).map_err(err)?;
        worst = worst.max((s.lambda[0] - lam / c).abs());
    }
    ok &= worst < 1e-10;
    check(ok, format!("lambda = {lam:.9}, -2logW = {:.7}, scale error {worst:.2e}", sol.neg2logw))
}

fn c3_exact_closed_form_agreement() -> Outcome {
    let gap = |families: usize| -> Result<f64, String> {
        let mut cfg = config(families / 2, families / 2, SignalSpec::constant(0.1), vec![0.25]);
        cfg.seed = 33;
        let diffs = (0..200u64)
            .into_par_iter()
            .map(|rep| {
                let ds = fitted(generate_dataset(&cfg, rep, 0).map_err(err)?)?;
                let r = local_test(&ds, 0.1, TestMode::ExactEl).map_err(err)?;
                Ok((r.statistic - r.closed_form_stat).abs())
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(median(diffs))
    };
    let small = gap(200)?;
    let large = gap(2000)?;
    check(large < small, format!("median |exact - closed form| {small:.3e} at n = 200, {large:.3e} at n = 2000"))
}

fn c4_boundary_law() -> Outcome {
    let mut cfg = config(50, 50, SignalSpec::constant(0.0), vec![0.25]);
    cfg.seed = 44;
    let stats = (0..500u64)
        .into_par_iter()
        .map(|rep| {
            let ds = fitted(generate_dataset(&cfg, rep, 0).map_err(err)?)?;
            Ok(local_test(&ds, 0.0, TestMode::ClosedForm).map_err(err)?.statistic)
        })
        .collect::<Result<Vec<f64>, String>>()?;
    let zero = stats.iter().filter(|&&s| s == 0.0).count() as f64 / stats.len() as f64;
    let mut pos: Vec<f64> = stats.into_iter().filter(|&s| s > 0.0).collect();
    pos.sort_by(f64::total_cmp);
    let k = pos.len() as f64;
    let ks = pos
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = chi2_1_cdf(s);
            (f - i as f64 / k).abs().max(((i + 1) as f64 / k - f).abs())
        })
        .fold(0.0f64, f64::max);
    check(
        (0.44..=0.56).contains(&zero) && ks < 0.10,
        format!("zero fraction {zero:.3}, KS distance of positive part {ks:.4}"),
    )
}

fn c5_type1() -> Outcome {
    let t = [0.25, 0.49, 0.75];
    let opts = LocalExperimentOptions::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for (family, hi) in [(ErrorFamily::Gaussian, 0.09), (ErrorFamily::StudentT3, 0.10)] {
        let mut cfg = config(50, 50, SignalSpec::constant(0.0), vec![0.25]);
        cfg.family = family;
        cfg.seed = 55;
        let rows = run_type1_experiment(&cfg, &t, 500, &opts).map_err(err)?;
        for r in rows {
            ok &= (0.02..=hi).contains(&r.estimate);
            parts.push(format!("{family:?}@{}={:.3}", r.x, r.estimate));
        }
    }
    check(ok, parts.join(", "))
}

fn c6_power_ordering() -> Outcome {
    let signal = SignalSpec::Indicator { value: 0.1, at: vec![0.25, 0.49] };
    let mut cfg = config(50, 50, signal, vec![0.25]);
    cfg.seed = 66;
    let t = [0.25, 0.49, 0.75];
    let sigma: Vec<f64> = t.iter().map(|&s| cfg.theta_at(s)[0]).collect();
    let rows = run_power_experiment(&cfg, &t, 500, &LocalExperimentOptions::default()).map_err(err)?;
    let peak = sigma.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|p| p.0).unwrap_or(0);
    let flat = sigma.iter().position(|&s| s.abs() < 1e-12).ok_or("no null grid point")?;
    let gap = rows[peak].estimate - rows[flat].estimate;
    check(
        gap >= 0.2,
        format!(
            "power {:.3} at t = {} (sigma2_A = {:.4}) vs {:.3} at t = {} (sigma2_A = 0)",
            rows[peak].estimate, t[peak], sigma[peak], rows[flat].estimate, t[flat]
        ),
    )
}

fn c7_global_power() -> Outcome {
    let mut cfg = config(50, 50, SignalSpec::Indicator { value: 0.0, at: vec![0.49] }, elvc::sim::default_t_grid());
    cfg.coupling = Coupling::SharedMultiplier;
    cfg.seed = 77;
    let c0 = [0.0, 0.02, 0.04, 0.06, 0.08, 0.1];
    let opts = GlobalExperimentOptions { g: 500, ..GlobalExperimentOptions::default() };
    let rows = run_global_experiment(&cfg, &c0, 200, &opts).map_err(err)?;
    let power: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
    let monotone = power.windows(2).all(|w| w[1] >= w[0] - 0.05);
    let size_ok = (0.01..=0.10).contains(&power[0]);
    let listing: Vec<String> = c0.iter().zip(&power).map(|(c, p)| format!("{c}:{p:.3}")).collect();
    check(monotone && size_ok, format!("power by c0 {}", listing.join(", ")))
}

fn c8_scan() -> Outcome {
    let signal = vec![0.47, 0.49, 0.51, 0.53];
    let mut cfg = config(50, 50, SignalSpec::Indicator { value: 0.08, at: signal.clone() }, elvc::sim::default_t_grid());
    cfg.coupling = Coupling::SharedMultiplier;
    cfg.seed = 88;
    let lengths = [3, 4, 5, 6];
    let threshold = scan_threshold(50, &lengths);
    let opts = GlobalExperimentOptions { g: 500, ..GlobalExperimentOptions::default() };
    let rows = run_scan_experiment(&cfg, &lengths, 100, &opts).map_err(err)?;
    let mut min_overlap = f64::INFINITY;
    let mut max_far: f64 = 0.0;
    for r in &rows {
        let (_, lo, hi) = r.window.ok_or("scan row without window")?;
        let overlaps = signal.iter().any(|&s| s >= lo - 1e-9 && s <= hi + 1e-9);
        let dist = signal.iter().map(|s| (s - r.x).abs()).fold(f64::INFINITY, f64::min);
        if overlaps {
            min_overlap = min_overlap.min(r.estimate);
        } else if dist >= 0.1 - 1e-9 {
            max_far = max_far.max(r.estimate);
        }
    }
    check(
        (threshold - 3.2330).abs() <= 1e-3 && min_overlap >= 0.7 && max_far <= 0.1,
        format!("threshold {threshold:.5}, min overlapping rate {min_overlap:.3}, max distant rate {max_far:.3}"),
    )
}

struct MomentGaps {
    mean: Vec<f64>,
    var: Vec<f64>,
    cross: f64,
}

fn perturbation_moment_gaps(families: usize, reps: u64, draws: usize) -> Result<MomentGaps, String> {
    let t = vec![0.25, 0.49, 0.75];
    let mut cfg = config(families / 2, families / 2, SignalSpec::constant(0.0), t.clone());
    cfg.coupling = Coupling::SharedMultiplier;
    cfg.seed = 99;
    let per_rep = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<(Vec<f64>, Vec<Vec<f64>>), String> {
            let grid = generate_grid(&cfg, rep).map_err(err)?.0.with_components(&default_fit_components()).map_err(err)?;
            let scores = grid_scores(&grid, 0.0).map_err(err)?;
            let root_n = (grid.n() as f64).sqrt();
            let orig = scores.iter().map(|p| p.sum_z / root_n).collect();
            let pert = (0..draws)
                .map(|g| {
                    let xi = multipliers(rep, g, grid.n());
                    scores
                        .iter()
                        .map(|p| p.m.iter().zip(&p.members).map(|(m, &i)| m * xi[i]).sum::<f64>() / root_n)
                        .collect()
                })
                .collect();
            Ok((orig, pert))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..t.len())
        .map(|j| {
            let z = per_rep.iter().map(|r| r.0[j]).collect();
            let m = per_rep.iter().flat_map(|r| r.1.iter().map(move |v| v[j])).collect();
            (z, m)
        })
        .collect();
    let var_z: Vec<f64> = cols.iter().map(|(z, _)| covariance(z, z)).collect();
    let mean = cols.iter().zip(&var_z).map(|((z, m), v)| (mean(z) - mean(m)).abs() / v.sqrt()).collect();
    let var = cols.iter().zip(&var_z).map(|((_, m), v)| (v - covariance(m, m)).abs() / v).collect();
    let mut cross: f64 = 0.0;
    for a in 0..t.len() {
        for b in a + 1..t.len() {
            let scale = (var_z[a] * var_z[b]).sqrt();
            let cz = covariance(&cols[a].0, &cols[b].0) / scale;
            let cm = covariance(&cols[a].1, &cols[b].1) / scale;
            cross = cross.max((cz - cm).abs());
        }
    }
    Ok(MomentGaps { mean, var, cross })
}

fn c9_perturbation_moments() -> Outcome {
    let gaps = perturbation_moment_gaps(100, 2000, 20)?;
    let worst = |v: &[f64]| v.iter().fold(0.0f64, |a, &b| a.max(b));
    let ok = worst(&gaps.mean) <= 0.1 && worst(&gaps.var) <= 0.1 && gaps.cross <= 0.15;
    check(
        ok,
        format!(
            "mean gap {:.3} sd, variance gap {:.3}, cross-t correlation gap {:.3}",
            worst(&gaps.mean),
            worst(&gaps.var),
            gaps.cross
        ),
    )
}

fn c10_fixed_effects() -> Outcome {
    let mut cfg = config(50, 50, SignalSpec::constant(0.1), vec![0.25]);
    cfg.seed = 110;
    let beta = DVector::from_vec(cfg.beta_at(0.25));
    let p = beta.len();
    let outcomes = (0..500u64)
        .into_par_iter()
        .map(|rep| -> Result<(bool, Vec<bool>), String> {
            let ds = fitted(generate_dataset(&cfg, rep, 0).map_err(err)?)?;
            let rejected = test_beta(&ds, &beta).map_err(err)?.p_value < 0.05;
            let fe = FixedEffects::new(&ds, Weighting::TwoStep).map_err(err)?;
            let covered = (0..p)
                .map(|k| {
                    let ci = fe.confidence_interval(k, 0.95).map_err(err)?;
                    Ok(ci.lower <= beta[k] && beta[k] <= ci.upper)
                })
                .collect::<Result<Vec<_>, String>>()?;
            Ok((rejected, covered))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let reps = outcomes.len() as f64;
    let rejection = outcomes.iter().filter(|o| o.0).count() as f64 / reps;
    let coverage: Vec<f64> = (0..p).map(|k| outcomes.iter().filter(|o| o.1[k]).count() as f64 / reps).collect();
    let ok = (0.02..=0.09).contains(&rejection) && coverage.iter().all(|c| (0.91..=0.98).contains(c));
    check(ok, format!("rejection {rejection:.3}, coverage {coverage:.3?}"))
}

fn c11_residual_rate() -> Outcome {
    let sizes = [50usize, 100, 200, 400];
    let reps = 2000u64;
    let mut points = Vec::new();
    for &families in &sizes {
        let mut cfg = config(families / 2, families / 2, SignalSpec::constant(0.1), vec![0.25]);
        cfg.seed = 111;
        let bias = (0..reps)
            .into_par_iter()
            .map(|rep| -> Result<Vec<f64>, String> {
                let (grid, truth) = generate_grid(&cfg, rep).map_err(err)?;
                let (ds, _) = grid.dataset_at(0).map_err(err)?;
                let fit = fit_least_squares(&ds).map_err(err)?;
                let beta = DVector::from_vec(truth.beta[0].clone());
                let d = ds.d();
                let mut acc = vec![0.0; d];
                for (s, r_hat) in ds.subjects().iter().zip(&fit.residuals) {
                    let eps = &s.y - &s.x * &beta;
                    let diff = r_hat * r_hat.transpose() - &eps * eps.transpose();
                    for (q, a) in acc.iter_mut().enumerate() {
                        *a += frobenius(&s.phi[q], &diff);
                    }
                }
                Ok(acc.into_iter().map(|a| a / ds.n() as f64).collect())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let d = bias[0].len();
        let norm = (0..d).map(|q| mean(&bias.iter().map(|b| b[q]).collect::<Vec<_>>()).powi(2)).sum::<f64>().sqrt();
        points.push(((families as f64).ln(), norm.ln()));
    }
    let mx = mean(&points.iter().map(|p| p.0).collect::<Vec<_>>());
    let my = mean(&points.iter().map(|p| p.1).collect::<Vec<_>>());
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    check((-1.3..=-0.7).contains(&slope), format!("log-log slope {slope:.3}"))
}

fn c12_ingestion() -> Outcome {
    let lt = log_transform(&[1.0], DEFAULT_SCALE).map_err(err)?[0];
    let ramp: Vec<f64> = (1..=1440).map(f64::from).collect();
    let q = day_quantiles(&ramp, 144).map_err(err)?;
    let ramp_ok = q.len() == 144 && q.iter().enumerate().all(|(k, &v)| v == 10.0 * (k + 1) as f64);
    let mut rng = elvc::rng::stream(12, 0);
    let mut monotone = true;
    for _ in 0..1000 {
        let active = rng.random_range(0.05..1.0);
        let counts: Vec<f64> = (0..1440)
            .map(|_| if rng.random::<f64>() < active { rng.random_range(0..2000) as f64 } else { 0.0 })
            .collect();
        let logged = log_transform(&counts, DEFAULT_SCALE).map_err(err)?;
        let prof = day_quantiles(&logged, 144).map_err(err)?;
        monotone &= prof.windows(2).all(|w| w[1] >= w[0]);
    }
    check(
        (lt - 9.13249).abs() <= 1e-5 && ramp_ok && monotone,
        format!("log_transform(1) = {lt:.6}, ramp quantiles exact: {ramp_ok}, profiles nondecreasing: {monotone}"),
    )
}

fn run_cli(args: &[&str], threads: usize) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_elvc"))
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn c13_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let grid = dir.path().join("grid.json");
    let grid_s = grid.to_str().ok_or("non-UTF-8 temp path")?;
    let exp = dir.path().join("exp.json");
    std::fs::write(
        &exp,
        r#"{"sim": {"n_mz": 20, "n_dz": 20, "t_grid": [0.1, 0.3, 0.5, 0.7, 0.9]}, "c0_list": [0.0, 0.1], "lengths": [2, 3]}"#,
    )
    .map_err(err)?;
    let exp_s = exp.to_str().ok_or("non-UTF-8 temp path")?;
    let sim = run_cli(&["simulate", "--seed", "13", "--rep", "2"], 1)?;
    std::fs::write(&grid, &sim).map_err(err)?;
    let commands: Vec<Vec<&str>> = vec![
        vec!["simulate", "--seed", "13", "--rep", "2"],
        vec!["test-global", "--input", grid_s, "--G", "300", "--seed", "5"],
        vec!["scan", "--input", grid_s, "--G", "200", "--seed", "5"],
        vec!["experiment", "type1", "--config", exp_s, "--reps", "60", "--seed", "3"],
        vec!["experiment", "power", "--config", exp_s, "--reps", "60", "--seed", "3"],
        vec!["experiment", "global", "--config", exp_s, "--reps", "20", "--G", "100", "--seed", "3"],
        vec!["experiment", "scan", "--config", exp_s, "--reps", "20", "--G", "100", "--seed", "3"],
    ];
    let mut differing = Vec::new();
    for args in &commands {
        let one = run_cli(args, 1)?;
        let four = run_cli(args, 4)?;
        if one != four || one.is_empty() {
            differing.push(args[..2.min(args.len())].join(" "));
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} commands byte-identical at 1 and 4 threads", commands.len())
        } else {
            format!("outputs differ for {differing:?}")
        },
    )
}

fn main() {
    let criteria: Vec<(&str, &str, fn() -> Outcome, Option<Duration>)> = vec![
        ("1", "score-sum identity", c1_score_sums, Some(Duration::from_secs(10))),
        ("2", "EL dual oracle", c2_el_dual, None),
        ("3", "exact and closed-form agreement", c3_exact_closed_form_agreement, Some(Duration::from_secs(300))),
        ("4", "boundary mixture law", c4_boundary_law, Some(Duration::from_secs(300))),
        ("5", "local type-1 error", c5_type1, Some(Duration::from_secs(900))),
        ("6", "local power ordering", c6_power_ordering, None),
        ("7", "global test power curve", c7_global_power, Some(Duration::from_secs(1800))),
        ("8", "scan detection", c8_scan, None),
        ("9", "perturbation moments", c9_perturbation_moments, None),
        ("10", "fixed-effects calibration", c10_fixed_effects, None),
        ("11", "residual bias rate", c11_residual_rate, None),
        ("12", "activity ingestion", c12_ingestion, None),
        ("13", "parallel determinism", c13_determinism, None),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let over = budget.is_some_and(|b| elapsed > b);
        let (pass, mut detail) = match outcome {
            Ok(d) => (!over, d),
            Err(d) => (false, d),
        };
        if over {
            detail.push_str(&format!("; exceeded time budget of {:?}", budget.unwrap_or_default()));
        }
        println!("{} criterion {id} ({name}): {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
