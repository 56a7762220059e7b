//! Packaged verification suites. Each is deterministic given its seed and
//! returns one `TestReport` per check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::DriftField;
use crate::duality::{liggett_identity_mc, DualState, McEstimate};
use crate::error::{Error, Result};
use crate::euler::{strong_solve, DEFAULT_REFINE};
use crate::grid::{sample_brownian, SamplePath, TimeGrid};
use crate::logistic::toy_logistic_2d;
use crate::quad::integrate_adaptive;
use crate::rng::RngSpec;
use crate::skorohod::{impute_noise, tilde_theta, ReflectionRule};
use crate::stats::{ks_test, normal_cdf, reflection_probabilities, TestReport};
use crate::surface::HypoSurface;

/// Weak-error allowance per unit step size.
pub const BIAS_PER_DT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualitySuiteParams {
    pub mu: f64,
    pub x: f64,
    pub z: f64,
    pub y: f64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Smallest tolerance for the closed-form comparisons.
    pub tolerance_floor: f64,
    pub include_wedge: bool,
    pub include_slab: bool,
}

impl Default for DualitySuiteParams {
    fn default() -> Self {
        Self {
            mu: 0.5,
            x: 0.0,
            z: -1.0,
            y: 1.0,
            horizon: 1.0,
            steps: 1000,
            paths: 20_000,
            seed: 1,
            tolerance_floor: 0.0,
            include_wedge: true,
            include_slab: true,
        }
    }
}

fn closeness(name: &str, est: McEstimate, exact: f64, dt: f64, floor: f64, seed: u64) -> TestReport {
    let tol = (3.0 * est.se + BIAS_PER_DT * dt).max(floor);
    TestReport::residual(name, est.mean, (est.mean - exact).abs(), tol, est.n).with_seeds(vec![seed])
}

fn agreement(name: &str, a: McEstimate, b: McEstimate, dt: f64, seed: u64) -> TestReport {
    let pooled = (a.se * a.se + b.se * b.se).sqrt();
    TestReport::residual(name, a.mean - b.mean, (a.mean - b.mean).abs(), 3.0 * pooled + BIAS_PER_DT * dt, a.n)
        .with_seeds(vec![seed])
}

/// Liggett duality E[Gamma(x*, X(T))] = E[Gamma(X*(T), x)] against the
/// reflection-principle closed form, plus two-estimator checks for the wedge
/// and slab families.
pub fn suite_duality(p: &DualitySuiteParams) -> Result<Vec<TestReport>> {
    let model = DriftField::Constant { mu: vec![p.mu] };
    let grid = TimeGrid::new(p.horizon, p.steps)?;
    let dt = grid.dt();
    let state = DualState::interval(p.z, p.y)?;
    let mut out = Vec::new();

    let exact = reflection_probabilities(p.horizon, p.x, p.z, p.y, p.mu)?.p_identity;
    let r = liggett_identity_mc(&[p.x], &state, &grid, p.paths, &model, RngSpec::new(p.seed, 0))?;
    out.push(closeness("duality/interval/primal", r.lhs, exact, dt, p.tolerance_floor, p.seed));
    out.push(closeness("duality/interval/dual", r.rhs, exact, dt, p.tolerance_floor, p.seed));

    let tiny = TimeGrid::new(1e-6, 1)?;
    let inner = 0.5 * (p.z + p.y);
    let r = liggett_identity_mc(&[inner], &state, &tiny, 1000, &model, RngSpec::new(p.seed, 1))?;
    out.push(TestReport::residual("duality/short-time/primal", r.lhs.mean, (r.lhs.mean - 1.0).abs(), 0.0, 1000));
    out.push(TestReport::residual("duality/short-time/dual", r.rhs.mean, (r.rhs.mean - 1.0).abs(), 0.0, 1000));

    let outside = p.y + 1.0;
    let exact = reflection_probabilities(p.horizon, outside, p.z, p.y, p.mu)?.p_identity;
    let r = liggett_identity_mc(&[outside], &state, &grid, p.paths, &model, RngSpec::new(p.seed, 2))?;
    out.push(closeness("duality/outside/primal", r.lhs, exact, dt, 0.0, p.seed));
    out.push(closeness("duality/outside/dual", r.rhs, exact, dt, 0.0, p.seed));

    if p.include_wedge {
        let g = TimeGrid::new(0.5, 250)?;
        let s = DualState::wedge([0.3, 1.0], [0.0, 0.0], [1.0, 0.3])?;
        let r = liggett_identity_mc(&[0.3, 0.1], &s, &g, p.paths, &DriftField::Bilinear2D, RngSpec::new(p.seed, 3))?;
        out.push(agreement("duality/wedge/primal-vs-dual", r.lhs, r.rhs, g.dt(), p.seed));
    }
    if p.include_slab {
        let m = toy_logistic_2d();
        let geo = m.geometry()?.clone();
        let g = TimeGrid::new(0.5, 250)?;
        let s = DualState::slab(vec![0.0, 0.0], geo.embed(&[0.0], 1.0), &geo.normal)?;
        let x = geo.embed(&[0.3], 0.5);
        let r = liggett_identity_mc(&x, &s, &g, p.paths, &DriftField::LogisticRegression(m), RngSpec::new(p.seed, 4))?;
        out.push(agreement("duality/slab/primal-vs-dual", r.lhs, r.rhs, g.dt(), p.seed));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowWienerParams {
    pub mu: f64,
    pub y: f64,
    pub x: f64,
    pub horizons: Vec<f64>,
    pub steps: usize,
    pub replicas: usize,
    pub seed: u64,
    pub threshold: f64,
    pub rule: ReflectionRule,
    pub include_bilinear: bool,
}

impl Default for FlowWienerParams {
    fn default() -> Self {
        Self {
            mu: 0.5,
            y: 0.3,
            x: 0.0,
            horizons: vec![0.25, 1.0],
            steps: 1000,
            replicas: 10_000,
            seed: 2,
            threshold: 0.01,
            rule: ReflectionRule::WholeStep,
            include_bilinear: true,
        }
    }
}

/// Reflected noise of the flow applied to the reversal of a backward path
/// started at `x`, for one replica.
pub fn flow_noise_replica(
    x: &[f64],
    y0: &HypoSurface,
    grid: &TimeGrid,
    model: &DriftField,
    rule: ReflectionRule,
    rng: RngSpec,
) -> Result<(SamplePath, SamplePath)> {
    let w = sample_brownian(grid, x.len(), rng.child(1));
    let refine = if model.constant_mu().is_some() { 1 } else { DEFAULT_REFINE };
    let backward = strong_solve(x, &w, model, refine, rng.child(2))?;
    let forward = backward.reversed();
    let theta = tilde_theta(y0, &forward, model, rule)?;
    Ok((forward, theta))
}

/// Samples of the reflected noise at the given grid indices, scaled by 1/sqrt(t).
pub fn flow_noise_samples(
    x: &[f64],
    y0: &HypoSurface,
    grid: &TimeGrid,
    model: &DriftField,
    rule: ReflectionRule,
    indices: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let per: Vec<Vec<Vec<f64>>> = (0..replicas as u64)
        .into_par_iter()
        .map(|i| {
            let (_, theta) = flow_noise_replica(x, y0, grid, model, rule, RngSpec::new(seed, i))?;
            Ok(indices
                .iter()
                .map(|&j| theta.point(j).iter().map(|v| v / grid.time(j).sqrt()).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    // Regroup as [index][coordinate][replica].
    let n = x.len();
    Ok((0..indices.len())
        .map(|k| (0..n).map(|c| per.iter().map(|r| r[k][c]).collect()).collect())
        .collect())
}

/// Wiener law of the flow output at grid times T/4, T/2 and T.
pub fn suite_flow_wiener(p: &FlowWienerParams) -> Result<Vec<TestReport>> {
    let model = DriftField::Constant { mu: vec![p.mu] };
    let y0 = HypoSurface::constant(p.y);
    let mut out = Vec::new();
    for &horizon in &p.horizons {
        let grid = TimeGrid::new(horizon, p.steps)?;
        let idx = [p.steps / 4, p.steps / 2, p.steps];
        let samples = flow_noise_samples(&[p.x], &y0, &grid, &model, p.rule, &idx, p.replicas, p.seed)?;
        for (k, &j) in idx.iter().enumerate() {
            let name = format!("flow-wiener/1d/T={horizon}/t={}", grid.time(j));
            out.push(ks_test(&name, &samples[k][0], normal_cdf, p.threshold)?.with_seeds(vec![p.seed]));
        }
    }

    // A start far above the surface takes the flip branch: output is -omega.
    let grid = TimeGrid::new(1.0, 200)?;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (forward, theta) = flow_noise_replica(&[p.x], &HypoSurface::constant(p.x - 50.0), &grid, &model, p.rule, RngSpec::new(p.seed, i))?;
        let omega = impute_noise(&forward, &model)?;
        for j in 0..=grid.steps() {
            worst = worst.max((theta.point(j)[0] + omega.point(j)[0]).abs());
        }
    }
    out.push(TestReport::residual("flow-wiener/outside-start-flip", worst, worst, 1e-12, 20));

    if p.include_bilinear {
        let grid = TimeGrid::new(0.5, 500)?;
        let y0 = HypoSurface::line([0.2, 1.0], [0.3, 0.0])?;
        let samples = flow_noise_samples(&[0.0, 0.0], &y0, &grid, &DriftField::Bilinear2D, p.rule, &[grid.steps()], p.replicas, p.seed)?;
        for c in 0..2 {
            let name = format!("flow-wiener/bilinear/T=0.5/coord={}", c + 1);
            out.push(ks_test(&name, &samples[0][c], normal_cdf, p.threshold)?.with_seeds(vec![p.seed]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReversalParams {
    pub mu: f64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub window: (f64, f64),
    pub seed: u64,
}

impl Default for ReversalParams {
    fn default() -> Self {
        Self { mu: 0.3, horizon: 1.0, steps: 100, paths: 200_000, window: (-3.0, 3.0), seed: 3 }
    }
}

const START_SET: (f64, f64) = (-1.0, 0.0);
const MID_SET: (f64, f64) = (-1.5, 1.5);
const END_SET: (f64, f64) = (0.0, 1.5);

fn inside(v: f64, set: (f64, f64)) -> bool {
    set.0 <= v && v <= set.1
}

/// int_A nu(x) P_x(X(T) in C) dx for drift -mu Brownian motion.
fn endpoint_mass(a: (f64, f64), c: (f64, f64), mu: f64, t: f64) -> Result<f64> {
    let s = t.sqrt();
    integrate_adaptive(
        |x| (-2.0 * mu * x).exp() * (normal_cdf((c.1 - x + mu * t) / s) - normal_cdf((c.0 - x + mu * t) / s)),
        a.0,
        a.1,
        1e-12,
    )
}

/// nu-weighted time reversal: E_nu[F(X)] = E_nu[F(X(T - .))], with starts
/// drawn uniformly on a window and weighted by nu times the window length.
pub fn suite_reversal(p: &ReversalParams) -> Result<Vec<TestReport>> {
    let (lo, hi) = p.window;
    if !(lo < hi) {
        return Err(Error::Precondition("empty window".into()));
    }
    for set in [START_SET, END_SET] {
        if set.0 < lo || set.1 > hi {
            return Err(Error::Precondition("window must contain the start and end sets".into()));
        }
    }
    let grid = TimeGrid::new(p.horizon, p.steps)?;
    let model = DriftField::Constant { mu: vec![p.mu] };
    let mid = p.steps / 2;
    // Per path: (forward box, reversed box, forward endpoints, reversed endpoints, constant), each weighted.
    let rows: Vec<[f64; 5]> = (0..p.paths as u64)
        .into_par_iter()
        .map(|i| {
            let rng = RngSpec::new(p.seed, i);
            let x0 = lo + (hi - lo) * rng.child(0).stream().uniform();
            let w = (-2.0 * p.mu * x0).exp() * (hi - lo);
            let path = crate::euler::simulate_primal(&[x0], &grid, &model, rng.child(1))?;
            let first = path.point(0)[0];
            let middle = path.point(mid)[0];
            let last = path.last()[0];
            let fwd_ends = inside(first, START_SET) && inside(last, END_SET);
            let rev_ends = inside(last, START_SET) && inside(first, END_SET);
            let f = |e: bool| if e && inside(middle, MID_SET) { w } else { 0.0 };
            Ok([f(fwd_ends), f(rev_ends), if fwd_ends { w } else { 0.0 }, if rev_ends { w } else { 0.0 }, w])
        })
        .collect::<Result<_>>()?;
    let col = |k: usize| McEstimate::from_samples(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
    let dt = grid.dt();
    let mut out = vec![agreement("reversal/path-box", col(0), col(1), dt, p.seed)];

    let constant = col(4);
    out.push(TestReport::residual("reversal/constant", constant.mean, 0.0, 0.0, p.paths));

    let fwd = endpoint_mass(START_SET, END_SET, p.mu, p.horizon)?;
    let rev = endpoint_mass(END_SET, START_SET, p.mu, p.horizon)?;
    out.push(TestReport::residual("reversal/endpoint-density-symmetry", fwd, (fwd - rev).abs(), 1e-9 * fwd.abs(), 0));
    out.push(closeness("reversal/endpoints/forward", col(2), fwd, dt, 0.0, p.seed));
    out.push(closeness("reversal/endpoints/reversed", col(3), rev, dt, 0.0, p.seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_duality_suite_passes() {
        let p = DualitySuiteParams { paths: 4000, steps: 200, ..Default::default() };
        for r in suite_duality(&p).unwrap() {
            assert!(r.pass, "{}", r.summary_line());
        }
    }

    #[test]
    fn small_reversal_suite_passes() {
        let p = ReversalParams { paths: 20_000, ..Default::default() };
        for r in suite_reversal(&p).unwrap() {
            assert!(r.pass, "{}", r.summary_line());
        }
    }

    #[test]
    fn flow_suite_reports_every_time() {
        let p = FlowWienerParams { replicas: 500, steps: 200, include_bilinear: false, ..Default::default() };
        let r = suite_flow_wiener(&p).unwrap();
        assert_eq!(r.len(), 2 * 3 + 1);
        assert!(r.last().unwrap().pass);
    }

    #[test]
    fn endpoint_mass_is_symmetric() {
        let a = endpoint_mass((-1.0, 0.0), (0.5, 2.0), 0.4, 0.7).unwrap();
        let b = endpoint_mass((0.5, 2.0), (-1.0, 0.0), 0.4, 0.7).unwrap();
        assert!((a - b).abs() < 1e-10 * a);
    }
}
