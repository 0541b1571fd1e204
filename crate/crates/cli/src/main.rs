mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use elvc::estimation::{fit_least_squares, gram_system, nuisance_theta, two_step_covariance};
use elvc::fixed_effects::{FixedEffects, Weighting};
use elvc::global::{global_test_from_scores, grid_scores, scan_from_scores};
use elvc::ingest::{assemble_grid, read_records, IngestConfig, OutlierRule};
use elvc::io::{parse_dataset_json, parse_grid_json, read_twin_csv, GridRecord};
use elvc::local_test::{local_test, nuisance_fallback, TestMode};
use elvc::sim::{
    generate_grid, run_global_experiment, run_power_experiment, run_scan_experiment, run_type1_experiment,
    ExperimentRow, GlobalExperimentOptions, LocalExperimentOptions, SimConfig,
};
use elvc::validate::validate_subjects;
use elvc::{ModelDataset, SubjectBlock};

use output::{emit, num, render_csv, render_json, Format, Table};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "elvc", version, about = "Empirical-likelihood tests for variance components in linear mixed models")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "ELVC_THREADS")]
    threads: Option<usize>,
    /// Output format (commands with tabular output default to csv).
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Least squares, nuisance estimates and the two-step covariance fit.
    Fit(FitArgs),
    /// Local test of the first variance component.
    TestLocal(TestLocalArgs),
    /// Empirical-likelihood test of the fixed effects.
    TestFixed(TestFixedArgs),
    /// Profile empirical-likelihood confidence intervals for coefficients.
    Ci(CiArgs),
    /// Maximally selected test over an outcome grid.
    TestGlobal(GlobalArgs),
    /// Interval scan over an outcome grid.
    Scan(ScanArgs),
    /// Simulate one twin-family outcome grid.
    Simulate(SimulateArgs),
    /// Monte Carlo experiments.
    Experiment(ExperimentArgs),
    /// Actigraphy counts to a quantile outcome grid.
    Preprocess(PreprocessArgs),
    /// Structural checks on a dataset.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct InputArg {
    /// Dataset (JSON, or twin-design CSV with a .csv extension).
    #[arg(long)]
    input: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum WeightingArg {
    TwoStep,
    Identity,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::TwoStep => Weighting::TwoStep,
            WeightingArg::Identity => Weighting::Identity,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    ClosedForm,
    ExactEl,
}

impl From<ModeArg> for TestMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ClosedForm => TestMode::ClosedForm,
            ModeArg::ExactEl => TestMode::ExactEl,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArg,
}

#[derive(Args)]
struct TestLocalArgs {
    #[command(flatten)]
    input: InputArg,
    #[arg(long)]
    theta0: f64,
    #[arg(long, value_enum, default_value = "closed-form")]
    mode: ModeArg,
    /// Zero-based index of the variance design to test.
    #[arg(long, default_value_t = 0)]
    component: usize,
    /// Drop nonpositive nuisance estimates whose zero-test does not reject.
    #[arg(long)]
    fallback: bool,
    #[arg(long, default_value_t = 0.05)]
    fallback_level: f64,
}

#[derive(Args)]
struct TestFixedArgs {
    #[command(flatten)]
    input: InputArg,
    /// Comma-separated null vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    beta0: Vec<f64>,
    #[arg(long, value_enum, default_value = "two-step")]
    weighting: WeightingArg,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    input: InputArg,
    /// Zero-based coefficient indices.
    #[arg(long, value_delimiter = ',', required = true)]
    coef: Vec<usize>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum, default_value = "two-step")]
    weighting: WeightingArg,
}

#[derive(Args)]
struct GridArgs {
    /// Outcome grid JSON.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    theta0: f64,
    #[arg(long = "G", default_value_t = 1000)]
    g: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct GlobalArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Use (1 + #exceedances) / (G + 1).
    #[arg(long)]
    corrected: bool,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5,6")]
    lengths: Vec<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replicate index.
    #[arg(long, default_value_t = 0)]
    rep: u64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ExperimentKind {
    Type1,
    Power,
    Global,
    Scan,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    kind: ExperimentKind,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long = "G")]
    g: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Wide or long activity CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "iqr15")]
    rule: OutlierRule,
    #[arg(long, default_value_t = elvc::ingest::DEFAULT_SCALE)]
    scale: f64,
    #[arg(long, default_value_t = elvc::ingest::DEFAULT_POINTS)]
    points: usize,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    input: InputArg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    sim: SimConfig,
    t_subset: Vec<f64>,
    reps: usize,
    local: LocalExperimentOptions,
    global: GlobalExperimentOptions,
    c0_list: Vec<f64>,
    lengths: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            t_subset: vec![0.25, 0.49, 0.75],
            reps: 500,
            local: LocalExperimentOptions::default(),
            global: GlobalExperimentOptions::default(),
            c0_list: vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.1],
            lengths: vec![3, 4, 5, 6],
        }
    }
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Numerical(String),
}

impl From<elvc::Error> for Failure {
    fn from(e: elvc::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

struct Ctx {
    format: Option<Format>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn format_or(&self, default: Format) -> Format {
        self.format.unwrap_or(default)
    }

    fn json_only(&self, name: &str) -> Result<(), Failure> {
        if self.format == Some(Format::Csv) {
            return Err(Failure::Input(format!("{name} has no CSV output; use --format json")));
        }
        Ok(())
    }

    fn write(&self, text: &str) -> CmdResult {
        emit(text, self.out.as_deref()).map_err(|e| Failure::Input(format!("cannot write output: {e}")))
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))
}

fn load_blocks(path: &Path) -> Result<Vec<SubjectBlock>, Failure> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let file = std::fs::File::open(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
        Ok(read_twin_csv(file)?)
    } else {
        Ok(parse_dataset_json(&read_text(path)?)?.to_blocks()?)
    }
}

fn load_dataset(path: &Path) -> Result<ModelDataset, Failure> {
    let blocks = load_blocks(path)?;
    let report = validate_subjects(&blocks);
    if report.has_errors() {
        let msgs: Vec<String> = report.errors().map(|i| i.message.clone()).collect();
        return Err(Failure::Input(format!("dataset failed validation: {}", msgs.join("; "))));
    }
    Ok(ModelDataset::new(blocks)?)
}

fn load_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        Some(p) => Ok(serde_json::from_str(&read_text(p)?)?),
        None => Ok(T::default()),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_fit(ctx: &Ctx, a: &FitArgs) -> CmdResult {
    ctx.json_only("fit")?;
    let ds = load_dataset(&a.input.input)?;
    let fit = fit_least_squares(&ds)?;
    let gram = gram_system(&ds, &fit)?;
    let nuisance = nuisance_theta(&gram);
    let two_step = two_step_covariance(&ds, &fit)?;
    let fe = FixedEffects::with_covariances(&ds, &two_step.h_hat)?;
    let result = json!({
        "n": ds.n(),
        "p": ds.p(),
        "d": ds.d(),
        "beta_ls": fit.beta_hat.as_slice(),
        "beta_el": fe.estimate().as_slice(),
        "theta_unconstrained": nuisance.theta_full,
        "nuisance_nonpositive": nuisance.nonpositive,
        "gram_condition": gram.design.condition,
        "alpha": gram.alpha(),
        "F": gram.f().as_slice(),
        "theta_two_step": two_step.theta.as_slice(),
        "ridged_subjects": two_step.ridged.iter().filter(|&&r| r).count(),
        "warnings": two_step.warnings,
    });
    let config = json!({"command": "fit", "input": path_str(&a.input.input)});
    ctx.write(&render_json(&config, &result)?)
}

fn cmd_test_local(ctx: &Ctx, a: &TestLocalArgs) -> CmdResult {
    let ds = load_dataset(&a.input.input)?;
    if a.component >= ds.d() {
        return Err(Failure::Input(format!("component {} out of range for d = {}", a.component, ds.d())));
    }
    let mut order = vec![a.component];
    order.extend((0..ds.d()).filter(|&q| q != a.component));
    let ds = ds.with_components(&order)?;
    let mode = TestMode::from(a.mode);
    let mut r = if a.fallback {
        nuisance_fallback(&ds, a.theta0, mode, a.fallback_level)?
    } else {
        local_test(&ds, a.theta0, mode)?
    };
    r.fallback_applied = r.fallback_applied.iter().map(|&c| order[c]).collect();
    let config = json!({
        "command": "test-local",
        "input": path_str(&a.input.input),
        "theta0": a.theta0,
        "mode": a.mode,
        "component": a.component,
        "fallback": a.fallback,
        "fallback_level": a.fallback_level,
    });
    match ctx.format_or(Format::Json) {
        Format::Json => ctx.write(&render_json(&config, &r)?),
        Format::Csv => {
            let mut t = Table::new(vec![
                "theta_null", "statistic", "closed_form_stat", "nu1sq", "nu2sq", "c_n", "boundary", "sum_z", "p_value",
                "hull_ok", "degenerate", "fallback_applied",
            ]);
            let dropped: Vec<String> = r.fallback_applied.iter().map(|c| c.to_string()).collect();
            t.push(vec![
                num(r.theta_null),
                num(r.statistic),
                num(r.closed_form_stat),
                num(r.nu1sq),
                num(r.nu2sq),
                num(r.c_n),
                r.boundary.to_string(),
                num(r.sum_z),
                num(r.p_value),
                r.hull_ok.to_string(),
                r.degenerate.to_string(),
                dropped.join(";"),
            ]);
            ctx.write(&render_csv(&config, &t)?)
        }
    }
}

fn cmd_test_fixed(ctx: &Ctx, a: &TestFixedArgs) -> CmdResult {
    let ds = load_dataset(&a.input.input)?;
    let fe = FixedEffects::new(&ds, a.weighting.into())?;
    let r = fe.test(&DVector::from_column_slice(&a.beta0))?;
    let config = json!({
        "command": "test-fixed",
        "input": path_str(&a.input.input),
        "beta0": a.beta0,
        "weighting": a.weighting,
    });
    match ctx.format_or(Format::Json) {
        Format::Json => ctx.write(&render_json(&config, &r)?),
        Format::Csv => {
            let mut t = Table::new(vec!["statistic", "dof", "p_value", "hull_ok"]);
            t.push(vec![num(r.statistic), r.dof.to_string(), num(r.p_value), r.hull_ok.to_string()]);
            ctx.write(&render_csv(&config, &t)?)
        }
    }
}

fn cmd_ci(ctx: &Ctx, a: &CiArgs) -> CmdResult {
    let ds = load_dataset(&a.input.input)?;
    let fe = FixedEffects::new(&ds, a.weighting.into())?;
    let cis = a
        .coef
        .par_iter()
        .map(|&k| fe.confidence_interval(k, a.level))
        .collect::<Result<Vec<_>, _>>()?;
    let config = json!({
        "command": "ci",
        "input": path_str(&a.input.input),
        "coef": a.coef,
        "level": a.level,
        "weighting": a.weighting,
    });
    match ctx.format_or(Format::Json) {
        Format::Json => ctx.write(&render_json(&config, &json!({ "ci": cis }))?),
        Format::Csv => {
            let mut t = Table::new(vec![
                "coef", "estimate", "lower", "upper", "se", "level", "lower_unbounded", "upper_unbounded",
            ]);
            for c in &cis {
                t.push(vec![
                    c.coef.to_string(),
                    num(c.estimate),
                    num(c.lower),
                    num(c.upper),
                    num(c.se),
                    num(c.level),
                    c.lower_unbounded.to_string(),
                    c.upper_unbounded.to_string(),
                ]);
            }
            ctx.write(&render_csv(&config, &t)?)
        }
    }
}

fn cmd_test_global(ctx: &Ctx, a: &GlobalArgs) -> CmdResult {
    let grid = parse_grid_json(&read_text(&a.grid.input)?)?;
    let scores = grid_scores(&grid, a.grid.theta0)?;
    let r = global_test_from_scores(&scores, grid.n(), a.grid.theta0, a.grid.g, a.grid.seed, a.corrected)?;
    let config = json!({
        "command": "test-global",
        "input": path_str(&a.grid.input),
        "theta0": a.grid.theta0,
        "G": a.grid.g,
        "seed": a.grid.seed,
        "corrected": a.corrected,
    });
    match ctx.format_or(Format::Json) {
        Format::Json => ctx.write(&render_json(&config, &r)?),
        Format::Csv => {
            let mut t = Table::new(vec!["t", "statistic", "degenerate"]);
            for ((tv, s), d) in r.t_values.iter().zip(&r.s_curve).zip(&r.degenerate) {
                t.push(vec![num(*tv), num(*s), d.to_string()]);
            }
            let mut text = render_csv(&config, &t)?;
            let summary = json!({"Gamma": r.gamma, "p_value": r.p_value, "argmax_t": r.argmax_t});
            text.insert_str(text.find('\n').map_or(0, |i| i + 1), &format!("# summary: {summary}\n"));
            ctx.write(&text)
        }
    }
}

fn cmd_scan(ctx: &Ctx, a: &ScanArgs) -> CmdResult {
    let grid = parse_grid_json(&read_text(&a.grid.input)?)?;
    let scores = grid_scores(&grid, a.grid.theta0)?;
    let r = scan_from_scores(&scores, grid.n(), a.grid.theta0, &a.lengths, a.grid.g, a.grid.seed)?;
    let config = json!({
        "command": "scan",
        "input": path_str(&a.grid.input),
        "theta0": a.grid.theta0,
        "G": a.grid.g,
        "seed": a.grid.seed,
        "lengths": a.lengths,
        "threshold": r.threshold,
        "n_candidates": r.n_candidates,
    });
    match ctx.format_or(Format::Csv) {
        Format::Json => ctx.write(&render_json(&config, &r)?),
        Format::Csv => {
            let mut t = Table::new(vec!["t_lo", "t_hi", "length", "Gamma_L", "h", "significant", "degenerate"]);
            for w in &r.windows {
                t.push(vec![
                    num(w.t_lo),
                    num(w.t_hi),
                    w.length.to_string(),
                    num(w.gamma),
                    num(w.h),
                    w.significant.to_string(),
                    w.degenerate.to_string(),
                ]);
            }
            ctx.write(&render_csv(&config, &t)?)
        }
    }
}

fn cmd_simulate(ctx: &Ctx, a: &SimulateArgs) -> CmdResult {
    ctx.json_only("simulate")?;
    let mut cfg: SimConfig = load_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (grid, _) = generate_grid(&cfg, a.rep)?;
    let mut record = GridRecord::from_grid(&grid);
    record.config = Some(json!({"command": "simulate", "rep": a.rep, "sim": cfg}));
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    ctx.write(&text)
}

fn experiment_table(kind: ExperimentKind, rows: &[ExperimentRow]) -> Table {
    let mut t = match kind {
        ExperimentKind::Type1 | ExperimentKind::Power => Table::new(vec!["t", "estimate", "mc_se", "reps"]),
        ExperimentKind::Global => Table::new(vec!["c0", "estimate", "mc_se", "reps"]),
        ExperimentKind::Scan => Table::new(vec!["length", "t_lo", "t_hi", "center", "estimate", "mc_se", "reps"]),
    };
    for r in rows {
        let mut row = Vec::new();
        if let Some((k, lo, hi)) = r.window {
            row.extend([k.to_string(), num(lo), num(hi)]);
        }
        row.extend([num(r.x), num(r.estimate), num(r.mc_se), r.reps.to_string()]);
        t.push(row);
    }
    t
}

fn cmd_experiment(ctx: &Ctx, a: &ExperimentArgs) -> CmdResult {
    let mut cfg: ExperimentConfig = load_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.sim.seed = s;
    }
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    if let Some(g) = a.g {
        cfg.global.g = g;
    }
    let rows = match a.kind {
        ExperimentKind::Type1 => run_type1_experiment(&cfg.sim, &cfg.t_subset, cfg.reps, &cfg.local)?,
        ExperimentKind::Power => run_power_experiment(&cfg.sim, &cfg.t_subset, cfg.reps, &cfg.local)?,
        ExperimentKind::Global => run_global_experiment(&cfg.sim, &cfg.c0_list, cfg.reps, &cfg.global)?,
        ExperimentKind::Scan => run_scan_experiment(&cfg.sim, &cfg.lengths, cfg.reps, &cfg.global)?,
    };
    let config = json!({"command": "experiment", "kind": a.kind, "experiment": cfg});
    match ctx.format_or(Format::Csv) {
        Format::Json => ctx.write(&render_json(&config, &rows)?),
        Format::Csv => ctx.write(&render_csv(&config, &experiment_table(a.kind, &rows))?),
    }
}

fn cmd_preprocess(ctx: &Ctx, a: &PreprocessArgs) -> CmdResult {
    ctx.json_only("preprocess")?;
    let file = std::fs::File::open(&a.input).map_err(|e| Failure::Input(format!("cannot read {}: {e}", a.input.display())))?;
    let records = read_records(file)?;
    let cfg = IngestConfig { scale: a.scale, points: a.points, rule: a.rule };
    let (grid, report) = assemble_grid(&records, &cfg)?;
    eprintln!("{}", report.summary());
    let config = json!({"command": "preprocess", "input": path_str(&a.input), "ingest": cfg, "report": report});
    let Some(grid) = grid else {
        return Err(Failure::Input("no complete twin family in the input".into()));
    };
    let mut record = GridRecord::from_grid(&grid);
    record.config = Some(config);
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    ctx.write(&text)
}

fn cmd_validate(ctx: &Ctx, a: &ValidateArgs) -> CmdResult {
    ctx.json_only("validate")?;
    let blocks = load_blocks(&a.input.input)?;
    let report = validate_subjects(&blocks);
    let config = json!({"command": "validate", "input": path_str(&a.input.input)});
    let result = json!({"valid": !report.has_errors(), "issues": report.issues});
    ctx.write(&render_json(&config, &result)?)?;
    if report.has_errors() {
        let msgs: Vec<String> = report.errors().map(|i| i.message.clone()).collect();
        return Err(Failure::Input(format!("validation failed: {}", msgs.join("; "))));
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Input("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Input(format!("cannot configure threads: {e}")))?;
    }
    let ctx = Ctx { format: cli.format, out: cli.out };
    match &cli.command {
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::TestLocal(a) => cmd_test_local(&ctx, a),
        Command::TestFixed(a) => cmd_test_fixed(&ctx, a),
        Command::Ci(a) => cmd_ci(&ctx, a),
        Command::TestGlobal(a) => cmd_test_global(&ctx, a),
        Command::Scan(a) => cmd_scan(&ctx, a),
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Experiment(a) => cmd_experiment(&ctx, a),
        Command::Preprocess(a) => cmd_preprocess(&ctx, a),
        Command::Validate(a) => cmd_validate(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
