use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use duallink::coupling::{
    mc_region_sampler, pitman_construct, rejection_oracle, run_coupling, CouplingTrajectory, Region,
};
use duallink::duality::simulate_dual;
use duallink::euler::simulate_primal;
use duallink::grid::sample_brownian;
use duallink::stats::{ks_test, ks_two_sample, summary_table, write_reports_jsonl, TestReport};
use duallink::suites::{suite_duality, suite_flow_wiener, suite_reversal};
use duallink::{DriftField, DualState, RngSpec};

use crate::config::{ExperimentConfig, ModelConfig, SuiteName};
use crate::flat::jsonl_to_csv;

/// Failure classes, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("{0}")]
    Setup(duallink::Error),
    #[error("{0}")]
    Numeric(duallink::Error),
    #[error("{0:#}")]
    Io(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Setup(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 5,
        }
    }
}

impl From<duallink::Error> for CliError {
    fn from(e: duallink::Error) -> Self {
        use duallink::Error as E;
        match e {
            E::Io(_) | E::Csv(_) | E::Json(_) => CliError::Io(e.into()),
            E::InvalidGrid(_)
            | E::Dimension { .. }
            | E::InvalidModel(_)
            | E::StepSize { .. }
            | E::Precondition(_)
            | E::Unsupported(_)
            | E::Data(_)
            | E::ImproperPosterior(_) => CliError::Setup(e),
            _ => CliError::Numeric(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Io(e)
    }
}

pub struct Outcome {
    pub run_dir: PathBuf,
    /// False when a statistical or invariant check failed (exit code 4).
    pub passed: bool,
    pub summary: String,
}

/// Creates `<root>/<command>-NNNN`, never reusing an existing directory.
pub fn create_run_dir(root: &Path, command: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(root).with_context(|| format!("creating output root {}", root.display()))?;
    let prefix = format!("{command}-");
    let mut next = fs::read_dir(root)?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|n| n.strip_prefix(&prefix)?.parse::<u32>().ok())
        .max()
        .map_or(1, |m| m + 1);
    loop {
        let dir = root.join(format!("{prefix}{next:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => next += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_reports(dir: &Path, reports: &[TestReport]) -> Result<(), CliError> {
    let mut f = create(dir, "reports.jsonl")?;
    write_reports_jsonl(reports, &mut f)?;
    f.flush()?;
    fs::write(dir.join("summary.txt"), summary_table(reports))?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let model = cfg.drift()?;
    let grid = cfg.time_grid()?;
    let x0 = &cfg.simulate.x0;
    let paths = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|i| simulate_primal(x0, &grid, &model, RngSpec::new(cfg.seed, i)))
        .collect::<duallink::Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(create(dir, "paths.csv")?);
    let mut header = vec!["replica".to_string(), "t".to_string()];
    header.extend((1..=x0.len()).map(|i| format!("x_{i}")));
    w.write_record(&header).context("writing paths.csv")?;
    for (i, p) in paths.iter().enumerate() {
        for j in 0..=grid.steps() {
            let mut row = vec![i.to_string(), fmt(grid.time(j))];
            row.extend(p.point(j).iter().map(|v| fmt(*v)));
            w.write_record(&row).context("writing paths.csv")?;
        }
    }
    w.flush()?;
    Ok(Outcome { run_dir: dir.into(), passed: true, summary: format!("{} primal paths written to paths.csv", paths.len()) })
}

#[derive(Serialize)]
struct DualRecord<'a> {
    replica: usize,
    t: f64,
    state: &'a DualState,
}

pub fn dual(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let model = cfg.drift()?;
    let grid = cfg.time_grid()?;
    let start = cfg.dual_state(&model)?;
    let runs = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|i| simulate_dual(&start, &grid, &model, RngSpec::new(cfg.seed, i)))
        .collect::<duallink::Result<Vec<_>>>()?;
    let mut f = create(dir, "dual.jsonl")?;
    let mut absorbed = 0;
    for (i, states) in runs.iter().enumerate() {
        absorbed += usize::from(states.last().is_some_and(|s| s.absorbed));
        for (j, s) in states.iter().enumerate() {
            serde_json::to_writer(&mut f, &DualRecord { replica: i, t: grid.time(j), state: s }).context("writing dual.jsonl")?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(Outcome {
        run_dir: dir.into(),
        passed: true,
        summary: format!("{} dual paths, {absorbed} absorbed by T, written to dual.jsonl", runs.len()),
    })
}

fn gamma_held(tr: &CouplingTrajectory, entrance: bool) -> bool {
    // An entrance start sits on the degenerate boundary, where Gamma is false.
    let from = usize::from(entrance);
    tr.gamma_flags[from..].iter().all(|g| *g)
}

pub fn couple(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let model = cfg.drift()?;
    let grid = cfg.time_grid()?;
    let start = cfg.dual_state(&model)?;
    let opts = cfg.coupling_options();
    let runs = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|i| run_coupling(&start, &grid, &model, RngSpec::new(cfg.seed, i), opts))
        .collect::<duallink::Result<Vec<_>>>()?;
    let entrance = start.is_entrance();
    let mut broken = 0;
    for (i, tr) in runs.iter().enumerate() {
        broken += usize::from(!gamma_held(tr, entrance));
        let mut f = create(dir, &format!("trajectories/replica_{i:05}.jsonl"))?;
        tr.write_jsonl(&mut f)?;
        f.flush()?;
    }
    Ok(Outcome {
        run_dir: dir.into(),
        passed: broken == 0,
        summary: format!("{} coupling trajectories, {broken} with a false Gamma flag", runs.len()),
    })
}

fn constant_1d(cfg: &ExperimentConfig) -> Result<f64, CliError> {
    match &cfg.model {
        ModelConfig::Constant { mu } if mu.len() == 1 => Ok(mu[0]),
        _ => Err(CliError::Setup(duallink::Error::Unsupported("pitman needs a one-dimensional constant drift".into()))),
    }
}

pub fn pitman(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let mu = constant_1d(cfg)?;
    let model = DriftField::constant(vec![mu]);
    let grid = cfg.time_grid()?;
    let start = DualState::entrance_interval(cfg.pitman.level);
    let opts = cfg.coupling_options();
    let rows = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|i| {
            let rng = RngSpec::new(cfg.seed, i);
            let tr = run_coupling(&start, &grid, &model, rng, opts)?;
            let v = pitman_construct(&tr.driving, mu)?;
            let half: Vec<f64> = tr.dual_states.iter().map(|s| 0.5 * (s.y()[0] - s.z()[0])).collect();
            let independent = pitman_construct(&sample_brownian(&grid, 1, rng.child(100)), mu)?;
            Ok((half, v.coord(0), independent.last()[0]))
        })
        .collect::<duallink::Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(create(dir, "pitman.csv")?);
    w.write_record(["replica", "t", "half_gap", "pitman"]).context("writing pitman.csv")?;
    let mut worst = 0.0f64;
    for (i, (half, v, _)) in rows.iter().enumerate() {
        for j in 0..=grid.steps() {
            worst = worst.max((half[j] - v[j]).abs());
            w.write_record([i.to_string(), fmt(grid.time(j)), fmt(half[j]), fmt(v[j])]).context("writing pitman.csv")?;
        }
    }
    w.flush()?;
    let mut reports = vec![TestReport::residual("pitman/grid-identity", worst, worst, 1e-10, rows.len()).with_seeds(vec![cfg.seed])];
    if rows.len() >= 20 {
        let coupled: Vec<f64> = rows.iter().map(|r| *r.0.last().expect("nonempty")).collect();
        let constructed: Vec<f64> = rows.iter().map(|r| r.2).collect();
        reports.push(ks_two_sample("pitman/marginal-at-T", &coupled, &constructed, cfg.pitman.threshold)?.with_seeds(vec![cfg.seed]));
    }
    write_reports(dir, &reports)?;
    Ok(Outcome { run_dir: dir.into(), passed: reports.iter().all(|r| r.pass), summary: summary_table(&reports) })
}

/// Seeds the suites from the top-level seed and, for a one-dimensional
/// constant model, uses its drift in the duality and flow suites.
pub fn resolve_verify(cfg: &mut ExperimentConfig) {
    let v = &mut cfg.verify;
    v.duality.seed = cfg.seed;
    v.flow_wiener.seed = cfg.seed.wrapping_add(1);
    v.reversal.seed = cfg.seed.wrapping_add(2);
    if let ModelConfig::Constant { mu } = &cfg.model {
        if let [m] = mu[..] {
            v.duality.mu = m;
            v.flow_wiener.mu = m;
        }
    }
}

pub fn verify(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let mut reports = Vec::new();
    for s in &cfg.verify.suites {
        reports.extend(match s {
            SuiteName::Duality => suite_duality(&cfg.verify.duality)?,
            SuiteName::FlowWiener => suite_flow_wiener(&cfg.verify.flow_wiener)?,
            SuiteName::Reversal => suite_reversal(&cfg.verify.reversal)?,
        });
    }
    write_reports(dir, &reports)?;
    Ok(Outcome { run_dir: dir.into(), passed: reports.iter().all(|r| r.pass), summary: summary_table(&reports) })
}

#[derive(Serialize)]
struct PosteriorSummary {
    accepts: usize,
    attempts: usize,
    acceptance_rate: f64,
    initial_offset: f64,
    timed_out: bool,
}

pub fn posterior(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let p = &cfg.posterior;
    let m = cfg.logistic_model(p.data.as_deref())?;
    let geo = m.geometry()?.clone();
    let model = DriftField::LogisticRegression(m);
    let out = mc_region_sampler(&p.region, &model, &p.sampler, cfg.seed)?;
    let mut f = create(dir, "samples.csv")?;
    out.write_csv(&mut f)?;
    f.flush()?;
    let summary = PosteriorSummary {
        accepts: out.accepts,
        attempts: out.attempts,
        acceptance_rate: out.acceptance_rate,
        initial_offset: out.initial_offset,
        timed_out: out.timed_out,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).context("summary")?)?;

    let mut reports = vec![TestReport::residual("posterior/accepts", out.accepts as f64, f64::from(u8::from(out.accepts == 0)), 0.0, out.attempts)];
    if out.accepts >= 20 {
        let oracle = rejection_oracle(&p.region, &model, p.oracle_samples, cfg.seed.wrapping_add(1))?;
        for i in 0..geo.normal.len() {
            let a: Vec<f64> = out.samples.iter().map(|x| x[i]).collect();
            let b: Vec<f64> = oracle.iter().map(|x| x[i]).collect();
            reports.push(ks_two_sample(&format!("posterior/coordinate-{}", i + 1), &a, &b, p.threshold)?);
        }
        if let Region::SlabRect { offset_lo, offset_hi, .. } = p.region {
            let offsets: Vec<f64> = out.samples.iter().map(|x| x.iter().zip(&geo.normal).map(|(a, b)| a * b).sum()).collect();
            let cdf = |v: f64| ((v - offset_lo) / (offset_hi - offset_lo)).clamp(0.0, 1.0);
            reports.push(ks_test("posterior/offsets-uniform", &offsets, cdf, p.threshold)?);
        }
    }
    let reports: Vec<TestReport> = reports.into_iter().map(|r| r.with_seeds(vec![cfg.seed])).collect();
    write_reports(dir, &reports)?;
    Ok(Outcome {
        run_dir: dir.into(),
        passed: out.accepts > 0 && reports.iter().all(|r| r.pass),
        summary: format!(
            "{} accepted of {} attempts (rate {:.4}){}\n{}",
            out.accepts,
            out.attempts,
            out.acceptance_rate,
            if out.timed_out { ", timed out" } else { "" },
            summary_table(&reports)
        ),
    })
}

fn jsonl_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            jsonl_files(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

/// Converts every JSONL artifact of `source` into CSV inside `dir`.
pub fn plot(source: &Path, dir: &Path) -> Result<Outcome, CliError> {
    let mut files = Vec::new();
    jsonl_files(source, &mut files).with_context(|| format!("reading run directory {}", source.display()))?;
    if files.is_empty() {
        return Err(CliError::Io(anyhow::anyhow!("no JSONL artifacts in {}", source.display())));
    }
    fs::write(dir.join("source.txt"), format!("{}\n", source.display()))?;
    let mut total = 0;
    for path in &files {
        let rel = path.strip_prefix(source).expect("found under source").with_extension("");
        let stem = rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "_");
        let rows = jsonl_to_csv(BufReader::new(File::open(path)?), create(dir, &format!("{stem}.csv"))?)?;
        if rel.starts_with("trajectories") {
            let tr = CouplingTrajectory::read_jsonl(BufReader::new(File::open(path)?))?;
            let mut f = create(dir, &format!("{stem}.tidy.csv"))?;
            tr.write_csv(&mut f)?;
            f.flush()?;
        }
        total += rows;
    }
    Ok(Outcome { run_dir: dir.into(), passed: true, summary: format!("{} JSONL files converted, {total} rows", files.len()) })
}

pub fn prepare(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    write_config(dir, cfg)
}
