//! The coupled dual/primal process: the primal path is simulated, its noise is
//! imputed, pushed through the forward reflection flow against the upper dual
//! surface, and the reflected noise then drives the Liggett dual.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::DriftField;
use crate::duality::{
    bessel_rate, gamma, harmonic_h, link_sample_with, xi_star_step_split, DualState, DualVariant, McEstimate,
};
use crate::error::{check_dim, Error, Result};
use crate::euler::{strong_solve, DEFAULT_REFINE};
use crate::grid::{dot, sample_brownian, SamplePath, TimeGrid};
use crate::logistic::HyperplaneGeometry;
use crate::rng::RngSpec;
use crate::skorohod::{impute_noise, ForwardStepper, ReflectionRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingOptions {
    pub rule: ReflectionRule,
    /// Refinement of the primal reference solve; `None` picks 1 for constant
    /// drift (where Euler is exact) and the library default otherwise.
    pub refine: Option<usize>,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        Self { rule: ReflectionRule::GridProjection, refine: None }
    }
}

impl CouplingOptions {
    fn refine_for(&self, model: &DriftField) -> usize {
        self.refine.unwrap_or(if model.constant_mu().is_some() { 1 } else { DEFAULT_REFINE })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTrajectory {
    pub grid: TimeGrid,
    pub dual_states: Vec<DualState>,
    pub primal: SamplePath,
    pub sigma: Vec<f64>,
    pub gamma_flags: Vec<bool>,
    /// Imputed noise of the primal path.
    pub noise: SamplePath,
    /// Brownian motion that drove the primal path.
    pub driving: SamplePath,
}

#[derive(Serialize, Deserialize)]
struct CouplingRecord {
    t: f64,
    z: Vec<f64>,
    y: Vec<f64>,
    x: Vec<f64>,
    sigma: f64,
    gamma: bool,
    dual: DualState,
}

impl CouplingTrajectory {
    pub fn all_gamma(&self) -> bool {
        self.gamma_flags.iter().all(|g| *g)
    }

    /// One JSON record per grid time.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for j in 0..=self.grid.steps() {
            let s = &self.dual_states[j];
            let rec = CouplingRecord {
                t: self.grid.time(j),
                z: s.z().to_vec(),
                y: s.y().to_vec(),
                x: self.primal.point(j).to_vec(),
                sigma: self.sigma[j],
                gamma: self.gamma_flags[j],
                dual: s.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads records written by `write_jsonl`. Noise paths are not stored and
    /// come back as zero paths.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut recs: Vec<CouplingRecord> = Vec::new();
        for line in input.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                recs.push(serde_json::from_str(&line)?);
            }
        }
        if recs.len() < 2 {
            return Err(Error::Data("coupling trajectory needs at least two records".into()));
        }
        let grid = TimeGrid::new(recs.last().unwrap().t, recs.len() - 1)?;
        let n = recs[0].x.len();
        let values = recs.iter().flat_map(|r| r.x.iter().copied()).collect();
        let primal = SamplePath::from_values(grid, n, values)?;
        let zero = SamplePath::constant(grid, &vec![0.0; n]);
        Ok(Self {
            grid,
            sigma: recs.iter().map(|r| r.sigma).collect(),
            gamma_flags: recs.iter().map(|r| r.gamma).collect(),
            dual_states: recs.into_iter().map(|r| r.dual).collect(),
            primal,
            noise: zero.clone(),
            driving: zero,
        })
    }

    /// Tidy table with columns t, z_i, y_i, x_i, sigma.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.primal.dim();
        let mut header = vec!["t".to_string()];
        for p in ["z", "y", "x"] {
            header.extend((1..=n).map(|i| format!("{p}_{i}")));
        }
        header.push("sigma".into());
        w.write_record(&header)?;
        for j in 0..=self.grid.steps() {
            let s = &self.dual_states[j];
            let mut row = vec![format!("{:?}", self.grid.time(j))];
            for v in s.z().iter().chain(s.y()).chain(self.primal.point(j)) {
                row.push(format!("{v:?}"));
            }
            row.push(format!("{:?}", self.sigma[j]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn flip(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    out[0] = -out[0];
    out
}

/// Couples a primal path from `x0` with the dual started at `start`.
fn couple_from(
    start: &DualState,
    x0: Vec<f64>,
    grid: &TimeGrid,
    model: &DriftField,
    rng: RngSpec,
    opts: CouplingOptions,
) -> Result<CouplingTrajectory> {
    let n = x0.len();
    check_dim(model.dim(), n)?;
    let driving = sample_brownian(grid, n, rng.child(1));
    let primal = strong_solve(&x0, &driving, model, opts.refine_for(model), rng.child(2))?;
    let noise = impute_noise(&primal, model)?;
    let dt = grid.dt();
    let (_, upper) = start.surfaces();
    let mut stepper = ForwardStepper::new(upper, &x0, model, opts.rule, dt)?;
    if start.is_entrance() {
        stepper = stepper.assume_inside();
    }
    let mut states = Vec::with_capacity(grid.steps() + 1);
    let mut sigma = Vec::with_capacity(grid.steps() + 1);
    let mut flags = Vec::with_capacity(grid.steps() + 1);
    states.push(start.clone());
    sigma.push(0.0);
    flags.push(gamma(start, &x0));
    for j in 1..=grid.steps() {
        let step = stepper.step(primal.point(j - 1), primal.point(j), &noise.increment(j))?;
        let next = xi_star_step_split(&states[j - 1], &step.reflected, &flip(&step.reflected), grid.time(j - 1), dt, model)?;
        flags.push(gamma(&next, primal.point(j)));
        states.push(next);
        sigma.push(stepper.sigma);
    }
    Ok(CouplingTrajectory { grid: *grid, dual_states: states, primal, sigma, gamma_flags: flags, noise, driving })
}

/// Coupling started from X(0) ~ lambda(x*0, .).
pub fn run_coupling(
    start: &DualState,
    grid: &TimeGrid,
    model: &DriftField,
    rng: RngSpec,
    opts: CouplingOptions,
) -> Result<CouplingTrajectory> {
    if start.absorbed {
        return Err(Error::Precondition("cannot couple from the coffin state".into()));
    }
    let x0 = link_sample_with(start, model, &mut rng.child(0).stream())?.point;
    couple_from(start, x0, grid, model, rng, opts)
}

/// Coupling from a degenerate boundary state; X(0) is drawn on the boundary.
pub fn run_entrance_coupling(
    start: &DualState,
    grid: &TimeGrid,
    model: &DriftField,
    rng: RngSpec,
    opts: CouplingOptions,
) -> Result<CouplingTrajectory> {
    if !start.is_entrance() {
        return Err(Error::Precondition("entrance coupling needs a degenerate dual state".into()));
    }
    run_coupling(start, grid, model, rng, opts)
}

/// Replicas `seed` with streams 0..count, in order.
pub fn run_couplings(
    start: &DualState,
    grid: &TimeGrid,
    model: &DriftField,
    seed: u64,
    count: usize,
    opts: CouplingOptions,
) -> Result<Vec<CouplingTrajectory>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| run_coupling(start, grid, model, RngSpec::new(seed, i), opts))
        .collect()
}

/// V(t) = 2 M(t) - (W(t) - 2 mu t) with M the running maximum of W(v) - 2 mu v on the grid.
pub fn pitman_construct(w: &SamplePath, mu: f64) -> Result<SamplePath> {
    check_dim(1, w.dim())?;
    let grid = *w.grid();
    let mut m = f64::NEG_INFINITY;
    let values = (0..=grid.steps())
        .map(|j| {
            let drifted = w.point(j)[0] - 2.0 * mu * grid.time(j);
            m = m.max(drifted);
            2.0 * m - drifted
        })
        .collect();
    SamplePath::from_values(grid, 1, values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BesselDiagnostics {
    pub grid: TimeGrid,
    pub m_path: Vec<f64>,
    /// R(t_j) = sum_{k<j} m(t_k)^2 dt.
    pub r_path: Vec<f64>,
    /// h(X*(t_j)) on the simulation grid.
    pub h_grid: Vec<f64>,
    /// tau at each grid time, NaN once beyond the simulated horizon.
    pub tau: Vec<f64>,
    /// H(t_j) = h(X*(tau_{t_j})), NaN where tau is unavailable.
    pub h_path: Vec<f64>,
    pub truncated: bool,
}

impl BesselDiagnostics {
    /// tau_t by linear inversion of R; `None` beyond the simulated horizon.
    pub fn tau_at(&self, t: f64) -> Option<f64> {
        self.locate(t).map(|(k, frac)| self.grid.time(k - 1) + frac * self.grid.dt())
    }

    /// H(t) = h(X*(tau_t)) with h interpolated linearly between grid states.
    pub fn h_at(&self, t: f64) -> Option<f64> {
        self.locate(t).map(|(k, frac)| self.h_grid[k - 1] + frac * (self.h_grid[k] - self.h_grid[k - 1]))
    }

    fn locate(&self, t: f64) -> Option<(usize, f64)> {
        let n = self.grid.steps();
        let r_end = self.r_path[n];
        // Tolerate roundoff in the accumulated R at the horizon.
        if !r_end.is_finite() || t > r_end * (1.0 + 1e-9) || t < 0.0 {
            return None;
        }
        let t = t.min(r_end);
        let k = self.r_path.partition_point(|r| *r < t).clamp(1, n);
        let span = self.r_path[k] - self.r_path[k - 1];
        let frac = if span > 0.0 { ((t - self.r_path[k - 1]) / span).clamp(0.0, 1.0) } else { 1.0 };
        Some((k, frac))
    }
}

/// Time change by the rate R(t) = int m(X*)^2 and the process H(t) = h(X*(tau_t)).
pub fn bessel_time_change(traj: &CouplingTrajectory, model: &DriftField) -> Result<BesselDiagnostics> {
    let grid = traj.grid;
    let dt = grid.dt();
    let mut m_path = Vec::with_capacity(grid.steps() + 1);
    let mut h_grid = Vec::with_capacity(grid.steps() + 1);
    for s in &traj.dual_states {
        if s.absorbed {
            m_path.push(f64::NAN);
            h_grid.push(0.0);
            continue;
        }
        m_path.push(bessel_rate(s, model)?);
        h_grid.push(if s.is_entrance() { 0.0 } else { harmonic_h(s, model)? });
    }
    let mut r_path = vec![0.0; grid.steps() + 1];
    for j in 1..=grid.steps() {
        r_path[j] = r_path[j - 1] + m_path[j - 1].powi(2) * dt;
    }
    let mut out = BesselDiagnostics { grid, m_path, r_path, h_grid, tau: Vec::new(), h_path: Vec::new(), truncated: false };
    for j in 0..=grid.steps() {
        let t = grid.time(j);
        out.tau.push(out.tau_at(t).unwrap_or(f64::NAN));
        out.h_path.push(out.h_at(t).unwrap_or(f64::NAN));
    }
    out.truncated = out.tau.iter().any(|t| t.is_nan());
    Ok(out)
}

/// Closed-form Lambda x for the interval dual under constant drift mu.
pub fn link_mean_interval(z: f64, y: f64, mu: f64) -> f64 {
    let len = y - z;
    let a = 2.0 * mu;
    if (a * len).abs() < 1e-8 {
        z + len / 2.0 - a * len * len / 12.0
    } else {
        z + 1.0 / a - len / (a * len).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorizationReport {
    pub t: f64,
    /// Mean of g(X*) f(X).
    pub joint: McEstimate,
    /// Mean of g(X*) (Lambda f)(X*).
    pub linked: McEstimate,
    pub pooled_se: f64,
    pub pass: bool,
}

/// Checks E[g(X*(t)) f(X(t))] = E[g(X*(t)) Lambda f(X*(t))] with f(x) = x on
/// the interval family, at each requested grid index.
pub fn factorization_check<G>(
    start: &DualState,
    grid: &TimeGrid,
    indices: &[usize],
    paths: usize,
    mu: f64,
    g: G,
    seed: u64,
    opts: CouplingOptions,
) -> Result<Vec<FactorizationReport>>
where
    G: Fn(&DualState) -> bool + Sync,
{
    let model = DriftField::Constant { mu: vec![mu] };
    let rows: Vec<Vec<(f64, f64)>> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let tr = run_coupling(start, grid, &model, RngSpec::new(seed, i), opts)?;
            Ok(indices
                .iter()
                .map(|&j| {
                    let s = &tr.dual_states[j];
                    if s.absorbed || !g(s) {
                        return (0.0, 0.0);
                    }
                    (tr.primal.point(j)[0], link_mean_interval(s.z()[0], s.y()[0], mu))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(indices
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let a: Vec<f64> = rows.iter().map(|r| r[k].0).collect();
            let b: Vec<f64> = rows.iter().map(|r| r[k].1).collect();
            let joint = McEstimate::from_samples(&a);
            let linked = McEstimate::from_samples(&b);
            let pooled_se = (joint.se.powi(2) + linked.se.powi(2)).sqrt();
            FactorizationReport {
                t: grid.time(j),
                joint,
                linked,
                pooled_se,
                pass: (joint.mean - linked.mean).abs() <= 3.0 * pooled_se,
            }
        })
        .collect())
}

/// Target set of the region sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Interval { lo: f64, hi: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Rectangle in (offset along d, coordinates in the basis of H).
    SlabRect { offset_lo: f64, offset_hi: f64, h_lo: Vec<f64>, h_hi: Vec<f64> },
}

impl Region {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Region::Interval { lo, hi } => lo < hi,
            Region::Box { lo, hi } => lo.len() == hi.len() && lo.iter().zip(hi).all(|(a, b)| a < b),
            Region::SlabRect { offset_lo, offset_hi, h_lo, h_hi } => {
                offset_lo < offset_hi && h_lo.len() == h_hi.len() && h_lo.iter().zip(h_hi).all(|(a, b)| a < b)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("region {self:?} is empty or malformed")))
        }
    }

    pub fn contains(&self, x: &[f64], geo: Option<&HyperplaneGeometry>) -> bool {
        match self {
            Region::Interval { lo, hi } => x.len() == 1 && *lo <= x[0] && x[0] <= *hi,
            Region::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| a <= v && v <= b),
            Region::SlabRect { offset_lo, offset_hi, h_lo, h_hi } => {
                let Some(geo) = geo else { return false };
                let off = dot(&geo.normal, x);
                let w = geo.project(x);
                *offset_lo <= off
                    && off <= *offset_hi
                    && w.iter().zip(h_lo.iter().zip(h_hi)).all(|(v, (a, b))| a <= v && v <= b)
            }
        }
    }

    /// Corner points in state coordinates.
    pub fn vertices(&self, geo: Option<&HyperplaneGeometry>) -> Result<Vec<Vec<f64>>> {
        fn corners(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
            (0..1usize << lo.len())
                .map(|mask| (0..lo.len()).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect())
                .collect()
        }
        Ok(match self {
            Region::Interval { lo, hi } => vec![vec![*lo], vec![*hi]],
            Region::Box { lo, hi } => corners(lo, hi),
            Region::SlabRect { offset_lo, offset_hi, h_lo, h_hi } => {
                let geo = geo.ok_or_else(|| Error::Precondition("slab region needs the model geometry".into()))?;
                let mut lo = vec![*offset_lo];
                lo.extend(h_lo);
                let mut hi = vec![*offset_hi];
                hi.extend(h_hi);
                corners(&lo, &hi).into_iter().map(|c| geo.embed(&c[1..], c[0])).collect()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionSamplerConfig {
    pub target_accepts: usize,
    /// Step size of the monitoring grid.
    pub dt: f64,
    /// Largest number of steps one attempt may take before it times out.
    pub max_steps: usize,
    /// Cap on attempts; reaching it ends the run with partial results.
    pub max_attempts: usize,
    /// Level of the initial surface along d; defaults to the middle of the
    /// region's extent along d.
    pub initial_offset: Option<f64>,
    pub rule: ReflectionRule,
}

impl Default for RegionSamplerConfig {
    fn default() -> Self {
        Self {
            target_accepts: 2000,
            dt: 1e-3,
            max_steps: 200_000,
            max_attempts: 1_000_000,
            initial_offset: None,
            rule: ReflectionRule::GridProjection,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionSamples {
    pub samples: Vec<Vec<f64>>,
    pub stop_times: Vec<f64>,
    pub attempts: usize,
    pub accepts: usize,
    pub acceptance_rate: f64,
    pub initial_offset: f64,
    /// Set when an attempt hit `max_steps` or attempts ran out; samples are partial.
    pub timed_out: bool,
}

impl RegionSamples {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.samples.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
        header.push("stop_time".into());
        w.write_record(&header)?;
        for (x, t) in self.samples.iter().zip(&self.stop_times) {
            let mut row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            row.push(format!("{t:?}"));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

enum Attempt {
    Stopped { x: Vec<f64>, t: f64 },
    TimedOut,
}

fn region_attempt(
    start: &DualState,
    vertices: &[Vec<f64>],
    model: &DriftField,
    cfg: &RegionSamplerConfig,
    rng: RngSpec,
) -> Result<Attempt> {
    let mut stream = rng.stream();
    let n = start.dim();
    let dt = cfg.dt;
    let mut x = link_sample_with(start, model, &mut stream)?.point;
    let (_, upper) = start.surfaces();
    let mut stepper = ForwardStepper::new(upper, &x, model, cfg.rule, dt)?.assume_inside();
    let mut state = start.clone();
    let mut dw = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut beta = vec![0.0; n];
    let sd = dt.sqrt();
    for k in 1..=cfg.max_steps {
        stream.fill_normal(&mut dw, sd);
        model.explicit_step_into(&x, &dw, dt, &mut next);
        model.eval_into(&next, &mut beta);
        let omega: Vec<f64> = (0..n).map(|i| next[i] - x[i] - beta[i] * dt).collect();
        let st = stepper.step(&x, &next, &omega)?;
        state = xi_star_step_split(&state, &st.reflected, &flip(&st.reflected), (k - 1) as f64 * dt, dt, model)?;
        std::mem::swap(&mut x, &mut next);
        if state.absorbed {
            return Err(Error::Diverged { time: k as f64 * dt });
        }
        if vertices.iter().all(|v| gamma(&state, v)) {
            return Ok(Attempt::Stopped { x, t: k as f64 * dt });
        }
    }
    Ok(Attempt::TimedOut)
}

/// Monte Carlo sampling of nu restricted to `region`: run the entrance
/// coupling until the dual band covers the region, then keep X if it lies in
/// the region.
pub fn mc_region_sampler(region: &Region, model: &DriftField, cfg: &RegionSamplerConfig, seed: u64) -> Result<RegionSamples> {
    region.validate()?;
    if cfg.target_accepts == 0 {
        return Err(Error::Precondition("target_accepts must be positive".into()));
    }
    let geo = match model {
        DriftField::LogisticRegression(m) => Some(m.geometry()?.clone()),
        _ => None,
    };
    let vertices = region.vertices(geo.as_ref())?;
    let (start, initial_offset) = match (&geo, region) {
        (None, Region::Interval { lo, hi }) => {
            check_dim(1, model.dim())?;
            let c = cfg.initial_offset.unwrap_or(0.5 * (lo + hi));
            (DualState::entrance_interval(c), c)
        }
        (Some(geo), Region::Box { .. } | Region::SlabRect { .. }) => {
            let offs: Vec<f64> = vertices.iter().map(|v| dot(&geo.normal, v)).collect();
            let lo = offs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = offs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let c = cfg.initial_offset.unwrap_or(0.5 * (lo + hi));
            let y = geo.normal.iter().map(|d| c * d).collect();
            (DualState::entrance_slab(y, &geo.normal)?, c)
        }
        _ => {
            return Err(Error::Unsupported(
                "region sampler supports 1-D intervals or logistic models with box/slab regions".into(),
            ))
        }
    };
    let batch = rayon::current_num_threads().max(1) * 8;
    let mut samples = Vec::new();
    let mut stop_times = Vec::new();
    let mut attempts = 0usize;
    let mut timed_out = false;
    'outer: while samples.len() < cfg.target_accepts {
        if attempts >= cfg.max_attempts {
            timed_out = true;
            break;
        }
        let count = batch.min(cfg.max_attempts - attempts);
        let results: Vec<Result<Attempt>> = (attempts..attempts + count)
            .into_par_iter()
            .map(|i| region_attempt(&start, &vertices, model, cfg, RngSpec::new(seed, i as u64)))
            .collect();
        for r in results {
            attempts += 1;
            match r? {
                Attempt::Stopped { x, t } => {
                    if region.contains(&x, geo.as_ref()) {
                        samples.push(x);
                        stop_times.push(t);
                        if samples.len() == cfg.target_accepts {
                            break 'outer;
                        }
                    }
                }
                Attempt::TimedOut => {
                    timed_out = true;
                    break 'outer;
                }
            }
        }
    }
    let accepts = samples.len();
    Ok(RegionSamples {
        samples,
        stop_times,
        attempts,
        accepts,
        acceptance_rate: accepts as f64 / attempts.max(1) as f64,
        initial_offset,
        timed_out,
    })
}

const ORACLE_PILOT: usize = 4096;
const ORACLE_MAX_PROPOSALS: usize = 100_000_000;

/// Direct rejection sampling of nu restricted to a bounded region, with
/// uniform proposals. Reference law for `mc_region_sampler`.
pub fn rejection_oracle(region: &Region, model: &DriftField, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    region.validate()?;
    let geo = match model {
        DriftField::LogisticRegression(m) => Some(m.geometry()?.clone()),
        _ => None,
    };
    let n = model.dim();
    match region {
        Region::Interval { .. } => check_dim(1, n)?,
        Region::Box { lo, .. } => check_dim(n, lo.len())?,
        Region::SlabRect { h_lo, .. } => {
            if geo.is_none() {
                return Err(Error::Unsupported("slab regions need a logistic model".into()));
            }
            check_dim(n - 1, h_lo.len())?
        }
    }
    let propose = |s: &mut crate::rng::Stream| -> Vec<f64> {
        let mut draw = |a: f64, b: f64| a + (b - a) * s.uniform();
        match region {
            Region::Interval { lo, hi } => vec![draw(*lo, *hi)],
            Region::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| draw(*a, *b)).collect(),
            Region::SlabRect { offset_lo, offset_hi, h_lo, h_hi } => {
                let off = draw(*offset_lo, *offset_hi);
                let w: Vec<f64> = h_lo.iter().zip(h_hi).map(|(a, b)| draw(*a, *b)).collect();
                geo.as_ref().expect("checked above").embed(&w, off)
            }
        }
    };
    let log_nu = |x: &[f64]| {
        model
            .potential(x)
            .map(|g| -2.0 * g)
            .ok_or_else(|| Error::Unsupported("the oracle needs a closed-form potential".into()))
    };
    let mut stream = RngSpec::new(seed, 0).stream();
    let mut bound = f64::NEG_INFINITY;
    for _ in 0..ORACLE_PILOT {
        bound = bound.max(log_nu(&propose(&mut stream))?);
    }
    bound += 1e-3;
    let mut out = Vec::with_capacity(count);
    let mut proposals = 0usize;
    while out.len() < count {
        proposals += 1;
        if proposals > ORACLE_MAX_PROPOSALS {
            return Err(Error::Sampler(format!("oracle accepted {} of {proposals} proposals", out.len())));
        }
        let x = propose(&mut stream);
        let l = log_nu(&x)?;
        if l > bound {
            // The pilot bound was too low; start over with the larger one.
            bound = l + 1e-3;
            out.clear();
            continue;
        }
        if stream.uniform().ln() < l - bound {
            out.push(x);
        }
    }
    Ok(out)
}

/// Upper/lower levels of an interval dual, or `None` for other families.
pub fn interval_levels(s: &DualState) -> Option<(f64, f64)> {
    match s.variant {
        DualVariant::Interval1D { z, y } => Some((z, y)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logistic::toy_logistic_2d;

    fn c(mu: f64) -> DriftField {
        DriftField::Constant { mu: vec![mu] }
    }

    #[test]
    fn pitman_examples() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let v = pitman_construct(&SamplePath::constant(g, &[0.0]), 0.5).unwrap();
        for j in 0..=4 {
            assert!((v.point(j)[0] - g.time(j)).abs() < 1e-15);
        }
        let g = TimeGrid::new(2.0, 2).unwrap();
        let w = SamplePath::from_values(g, 1, vec![0.0, 1.0, -1.0]).unwrap();
        assert_eq!(pitman_construct(&w, 0.0).unwrap().coord(0), vec![0.0, 1.0, 3.0]);
    }

    #[test]
    fn coupling_keeps_gamma_interval() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let s = DualState::interval(-1.0, 1.0).unwrap();
        for tr in run_couplings(&s, &g, &c(0.5), 1, 100, CouplingOptions::default()).unwrap() {
            assert!(tr.all_gamma());
            assert!(tr.sigma.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn entrance_coupling_is_pitman_on_the_grid() {
        let g = TimeGrid::new(1.0, 500).unwrap();
        for mu in [0.0, 0.5] {
            for i in 0..20 {
                let tr = run_entrance_coupling(&DualState::entrance_interval(0.0), &g, &c(mu), RngSpec::new(2, i), CouplingOptions::default()).unwrap();
                let v = pitman_construct(&tr.driving, mu).unwrap();
                for j in 0..=500 {
                    let s = &tr.dual_states[j];
                    let half = 0.5 * (s.y()[0] - s.z()[0]);
                    assert!((half - v.point(j)[0]).abs() < 1e-10, "mu {mu} seed {i} j {j}");
                }
            }
        }
    }

    #[test]
    fn bessel_constant_rate() {
        let g = TimeGrid::new(0.25, 400).unwrap();
        let tr = run_entrance_coupling(&DualState::entrance_interval(0.0), &g, &c(0.0), RngSpec::new(3, 0), CouplingOptions::default()).unwrap();
        let b = bessel_time_change(&tr, &c(0.0)).unwrap();
        assert!(b.m_path.iter().all(|m| *m == 2.0));
        assert!(b.r_path.windows(2).all(|w| w[1] >= w[0]));
        // R(t) = 4 t, so H at time 4 t_j is (Y - Z)(t_j); H(1) is the end gap.
        let s = tr.dual_states.last().unwrap();
        let gap = s.y()[0] - s.z()[0];
        let r_end = *b.r_path.last().unwrap();
        assert!((r_end - 1.0).abs() < 1e-12);
        assert!((b.h_at(0.25).unwrap() - (tr.dual_states[100].y()[0] - tr.dual_states[100].z()[0])).abs() < 1e-9);
        assert!((b.h_at(1.0).unwrap() - gap).abs() < 1e-12);
        assert!(b.h_at(1.1).is_none());
        assert!(!b.truncated);
        assert!(gap > 0.0);
    }

    #[test]
    fn slab_rate_is_constant() {
        let m = toy_logistic_2d();
        let model = DriftField::LogisticRegression(m.clone());
        let d = m.geometry().unwrap().normal.clone();
        let g = TimeGrid::new(0.5, 100).unwrap();
        let tr = run_entrance_coupling(&DualState::entrance_slab(vec![0.0, 0.0], &d).unwrap(), &g, &model, RngSpec::new(1, 0), CouplingOptions::default()).unwrap();
        let b = bessel_time_change(&tr, &model).unwrap();
        for j in 0..=100 {
            assert!((b.r_path[j] - 4.0 * d[0] * d[0] * g.time(j)).abs() < 1e-12, "{j} {:?}", tr.dual_states[j]);
        }
        for j in 1..=100 {
            assert!(tr.dual_states[j].separation() > 0.0);
        }
    }

    #[test]
    fn link_mean_matches_quadrature() {
        for (z, y, mu) in [(-1.0, 1.0, 0.5), (0.0, 2.0, 0.0), (0.3, 0.31, 0.7), (-2.0, 1.0, -0.4)] {
            let q = crate::duality::link_expectation(|x| x, z, y, mu);
            assert!((link_mean_interval(z, y, mu) - q).abs() < 1e-10, "{z} {y} {mu}");
        }
    }

    #[test]
    fn region_vertices_and_contains() {
        let r = Region::Box { lo: vec![0.0, 1.0], hi: vec![1.0, 2.0] };
        assert_eq!(r.vertices(None).unwrap().len(), 4);
        assert!(r.contains(&[0.5, 1.5], None));
        assert!(!r.contains(&[1.5, 1.5], None));
        assert!(Region::Interval { lo: 1.0, hi: 0.0 }.validate().is_err());
    }

    #[test]
    fn region_sampler_interval_runs() {
        let cfg = RegionSamplerConfig { target_accepts: 50, dt: 1e-3, ..Default::default() };
        let out = mc_region_sampler(&Region::Interval { lo: -0.5, hi: 0.5 }, &c(0.5), &cfg, 7).unwrap();
        assert_eq!(out.accepts, 50);
        assert!(out.samples.iter().all(|x| x[0].abs() <= 0.5));
        assert!(out.acceptance_rate > 0.0 && !out.timed_out);
    }

    #[test]
    fn region_sampler_times_out_with_partial_results() {
        let cfg = RegionSamplerConfig { target_accepts: 5, dt: 1e-3, max_steps: 3, ..Default::default() };
        let out = mc_region_sampler(&Region::Interval { lo: -5.0, hi: 5.0 }, &c(0.5), &cfg, 1).unwrap();
        assert!(out.timed_out);
        assert_eq!(out.accepts, 0);
    }

    #[test]
    fn rejection_oracle_interval_mean() {
        let xs = rejection_oracle(&Region::Interval { lo: -0.5, hi: 0.5 }, &c(0.5), 20_000, 3).unwrap();
        let mean = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        let exact = link_mean_interval(-0.5, 0.5, 0.5);
        assert!((mean - exact).abs() < 0.01, "{mean} {exact}");
        let m = toy_logistic_2d();
        let r = Region::SlabRect { offset_lo: 0.0, offset_hi: 1.0, h_lo: vec![-1.0], h_hi: vec![1.0] };
        let geo = m.geometry().unwrap().clone();
        let xs = rejection_oracle(&r, &DriftField::LogisticRegression(m), 100, 1).unwrap();
        assert!(xs.iter().all(|x| r.contains(x, Some(&geo))));
    }

    #[test]
    fn jsonl_and_csv_round_trip() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let tr = run_coupling(&DualState::interval(-1.0, 1.0).unwrap(), &g, &c(0.5), RngSpec::new(1, 1), CouplingOptions::default()).unwrap();
        let mut buf = Vec::new();
        tr.write_jsonl(&mut buf).unwrap();
        let back = CouplingTrajectory::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.dual_states, tr.dual_states);
        assert_eq!(back.primal, tr.primal);
        assert_eq!(back.sigma, tr.sigma);
        let mut csv = Vec::new();
        tr.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,z_1,y_1,x_1,sigma"));
    }
}
