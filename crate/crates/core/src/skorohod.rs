//! One-dimensional Skorohod reflection and the coupled reflection flows.
//!
//! The backward flow runs an explicit Euler path under a given (time-reversed)
//! surface trajectory and pushes the first noise coordinate down by a local
//! time sigma whenever the step would leave the hypograph. The forward flow
//! runs the same construction forward in time on a given primal path, while
//! evolving the surface with the reflected, sign-flipped noise.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::drift::DriftField;
use crate::error::{Error, Result};
use crate::grid::SamplePath;
use crate::surface::{HypoSurface, SurfaceTrajectory};

/// How much local time a triggered step accrues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionRule {
    /// Twice the first-coordinate increment over the whole step. The gap to the
    /// surface is then unchanged by the step and the flow is exactly
    /// invertible under time reversal.
    #[default]
    WholeStep,
    /// The least push that keeps the end point inside. Reproduces the discrete
    /// running-minimum formula exactly, but is not time-reversible.
    GridProjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionOutput {
    pub eta: Vec<f64>,
    pub ell: Vec<f64>,
}

impl ReflectionOutput {
    /// sum_k eta(s_k) (ell(s_k) - ell(s_{k-1})); zero for an exact solution.
    pub fn complementarity(&self) -> f64 {
        self.ell
            .windows(2)
            .zip(&self.eta[1..])
            .map(|(w, e)| e * (w[1] - w[0]))
            .sum()
    }
}

/// ell(s) = -min_{u <= s} min(kappa(u), 0), eta = kappa + ell.
pub fn solve_skorohod_1d(kappa: &[f64]) -> Result<ReflectionOutput> {
    match kappa.first() {
        None => return Err(Error::Precondition("empty path".into())),
        Some(k0) if *k0 < 0.0 => {
            return Err(Error::Precondition(format!("kappa(0) = {k0} must be nonnegative")))
        }
        _ => {}
    }
    let mut ell = Vec::with_capacity(kappa.len());
    let mut run = 0.0f64;
    for k in kappa {
        run = run.max(-k);
        ell.push(run);
    }
    let eta = kappa.iter().zip(&ell).map(|(k, l)| k + l).collect();
    Ok(ReflectionOutput { eta, ell })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    /// Local time at grid points.
    pub sigma: Vec<f64>,
    /// Input noise with sigma subtracted from the first coordinate.
    pub reflected_noise: SamplePath,
    pub trajectory: SamplePath,
    pub outside: bool,
    /// Whether the trigger fired on step j (index j - 1).
    pub triggered: Vec<bool>,
    /// Surface height above the trajectory at each grid point.
    pub gaps: Vec<f64>,
}

impl FlowOutput {
    /// sum_j gap(t_j) (sigma(t_j) - sigma(t_{j-1})).
    pub fn complementarity(&self) -> f64 {
        self.sigma
            .windows(2)
            .zip(&self.gaps[1..])
            .map(|(w, g)| g * (w[1] - w[0]))
            .sum()
    }

    /// 2 max(K, 1) * (largest first-coordinate noise step) * sigma(T).
    pub fn complementarity_tolerance(&self, surface_lipschitz: f64) -> f64 {
        let steps = self.reflected_noise.grid().steps();
        let modulus = (1..=steps)
            .map(|j| {
                (self.reflected_noise.increment_coord(j, 0) + self.sigma[j] - self.sigma[j - 1]).abs()
            })
            .fold(0.0, f64::max);
        2.0 * surface_lipschitz.max(1.0) * modulus * self.sigma.last().copied().unwrap_or(0.0).abs()
    }

    /// Columns t, sigma, gap, x_1..x_n and, when given, flattened surface parameters.
    pub fn write_csv<W: Write>(&self, out: W, surfaces: Option<&SurfaceTrajectory>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.trajectory.dim();
        let params = |s: &HypoSurface| -> Vec<f64> {
            match s {
                HypoSurface::Constant1D { level } => vec![*level],
                HypoSurface::Line2D { u, anchor } => vec![u[0], u[1], anchor[0], anchor[1]],
                HypoSurface::Hyperplane { normal, anchor } => {
                    normal.iter().chain(anchor.iter()).copied().collect()
                }
            }
        };
        let mut header: Vec<String> = vec!["t".into(), "sigma".into(), "gap".into()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        if let Some(s) = surfaces {
            header.extend((1..=params(s.at(0)).len()).map(|i| format!("surface_{i}")));
        }
        w.write_record(&header)?;
        let grid = self.trajectory.grid();
        for j in 0..=grid.steps() {
            let mut row = vec![
                format!("{:?}", grid.time(j)),
                format!("{:?}", self.sigma[j]),
                format!("{:?}", self.gaps[j]),
            ];
            row.extend(self.trajectory.point(j).iter().map(|v| format!("{v:?}")));
            if let Some(s) = surfaces {
                row.extend(params(s.at(j)).iter().map(|v| format!("{v:?}")));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_same_grid(a: &SamplePath, b: &SamplePath) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(Error::Precondition(format!(
            "grid mismatch: {:?} vs {:?}",
            a.grid(),
            b.grid()
        )));
    }
    Ok(())
}

/// Backward reflection flow under the time-reversed surface trajectory.
pub fn backward_flow(
    x_start: &[f64],
    surfaces: &SurfaceTrajectory,
    noise: &SamplePath,
    drift: &DriftField,
    rule: ReflectionRule,
) -> Result<FlowOutput> {
    let grid = *noise.grid();
    if surfaces.grid != grid || !surfaces.is_complete() {
        return Err(Error::Precondition("surface trajectory does not match the noise grid".into()));
    }
    let n = x_start.len();
    crate::error::check_dim(drift.dim(), n)?;
    let dt = grid.dt();
    let outside = !surfaces.at(0).contains(x_start);
    let mut sigma = vec![0.0; grid.steps() + 1];
    let mut triggered = vec![false; grid.steps()];
    let mut traj = SamplePath::constant(grid, x_start);
    let mut beta = vec![0.0; n];
    let mut next = vec![0.0; n];
    for k in 1..=grid.steps() {
        let prev = traj.point(k - 1).to_vec();
        drift.eval_into(&prev, &mut beta);
        let d0 = noise.increment_coord(k, 0);
        for i in 1..n {
            next[i] = prev[i] - beta[i] * dt + noise.increment_coord(k, i);
        }
        let free = prev[0] - beta[0] * dt;
        let dsig = if outside {
            2.0 * d0
        } else {
            let height = surfaces.at(k).evaluate(&next[1..])?;
            let fire = free + d0.abs() > height;
            triggered[k - 1] = fire;
            match (fire, rule) {
                (false, _) => 0.0,
                (true, ReflectionRule::WholeStep) => 2.0 * d0,
                (true, ReflectionRule::GridProjection) => (free + d0 - height).max(0.0),
            }
        };
        next[0] = free + d0 - dsig;
        if !outside && rule == ReflectionRule::GridProjection && triggered[k - 1] {
            // Guard against rounding past the surface.
            let height = surfaces.at(k).evaluate(&next[1..])?;
            next[0] = next[0].min(height);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { time: grid.time(k) });
        }
        sigma[k] = sigma[k - 1] + dsig;
        traj.point_mut(k).copy_from_slice(&next);
    }
    let reflected = with_first_shifted(noise, &sigma);
    let gaps = (0..=grid.steps()).map(|k| surfaces.at(k).gap(traj.point(k))).collect();
    Ok(FlowOutput { sigma, reflected_noise: reflected, trajectory: traj, outside, triggered, gaps })
}

fn with_first_shifted(noise: &SamplePath, sigma: &[f64]) -> SamplePath {
    let mut out = noise.clone();
    for (j, s) in sigma.iter().enumerate() {
        out.point_mut(j)[0] -= s;
    }
    out
}

/// Outcome of one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardStep {
    pub dsigma: f64,
    pub triggered: bool,
    /// Reflected noise increment (first coordinate reduced by dsigma).
    pub reflected: Vec<f64>,
}

/// Incremental forward flow: one call per grid step of the primal path.
#[derive(Debug, Clone)]
pub struct ForwardStepper<'a> {
    drift: &'a DriftField,
    rule: ReflectionRule,
    dt: f64,
    step: usize,
    outside: bool,
    pub surface: HypoSurface,
    pub sigma: f64,
    pub predictor: Vec<f64>,
    beta: Vec<f64>,
}

impl<'a> ForwardStepper<'a> {
    pub fn new(y0: HypoSurface, x0: &[f64], drift: &'a DriftField, rule: ReflectionRule, dt: f64) -> Result<Self> {
        crate::error::check_dim(y0.dim(), x0.len())?;
        crate::error::check_dim(drift.dim(), x0.len())?;
        let outside = !y0.contains(x0);
        let mut predictor = x0.to_vec();
        predictor[0] = x0[0] + y0.gap(x0);
        Ok(Self {
            drift,
            rule,
            dt,
            step: 0,
            outside,
            surface: y0,
            sigma: 0.0,
            predictor,
            beta: vec![0.0; x0.len()],
        })
    }

    pub fn outside(&self) -> bool {
        self.outside
    }

    /// Treats the start as contained. Entrance starts sit on the surface, where
    /// the computed gap can round to a tiny negative number.
    pub fn assume_inside(mut self) -> Self {
        self.outside = false;
        self
    }

    /// Advances from x_prev to x_next, where `dw` is the imputed noise increment.
    pub fn step(&mut self, x_prev: &[f64], x_next: &[f64], dw: &[f64]) -> Result<ForwardStep> {
        self.step += 1;
        let height_prev = x_prev[0] + self.surface.gap(x_prev);
        let (mut dsigma, triggered) = if self.outside {
            (2.0 * dw[0], false)
        } else {
            self.drift.eval_into(x_next, &mut self.beta);
            let free = x_next[0] - self.beta[0] * self.dt;
            let fire = free + dw[0].abs() > height_prev;
            let ds = match (fire, self.rule) {
                (false, _) => 0.0,
                (true, ReflectionRule::WholeStep) => 2.0 * dw[0],
                (true, ReflectionRule::GridProjection) => (free + dw[0] - height_prev).max(0.0),
            };
            (ds, fire)
        };
        let mut flipped: Vec<f64> = dw.to_vec();
        flipped[0] = -(dw[0] - dsigma);
        let mut next = self.surface.step(&flipped, self.dt, self.drift)?;
        if !self.outside && self.rule == ReflectionRule::GridProjection && triggered {
            // Rounding guard: the projection targets a zero gap exactly.
            for _ in 0..4 {
                let gap = next.gap(x_next);
                if gap >= 0.0 {
                    break;
                }
                dsigma += -gap * (1.0 + 1e-12) + f64::EPSILON * (1.0 + x_next[0].abs());
                flipped[0] = -(dw[0] - dsigma);
                next = self.surface.step(&flipped, self.dt, self.drift)?;
            }
        }
        if let HypoSurface::Line2D { u, .. } = &next {
            if !(u[1] > u[0].abs()) {
                return Err(Error::SurfaceDegenerate { step: self.step, detail: format!("direction {u:?}") });
            }
        }
        let base = if self.step == 1 || triggered {
            let mut b = x_prev.to_vec();
            b[0] = height_prev;
            b
        } else {
            self.predictor.clone()
        };
        self.predictor = self.drift.implicit_step(&base, &flipped, self.dt)?;
        self.surface = next;
        self.sigma += dsigma;
        let mut reflected = dw.to_vec();
        reflected[0] -= dsigma;
        Ok(ForwardStep { dsigma, triggered, reflected })
    }
}

/// Forward flow together with the evolved surfaces and the predictor path.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardFlow {
    pub flow: FlowOutput,
    pub surfaces: SurfaceTrajectory,
    pub predictor: SamplePath,
}

/// Forward reflection flow of the primal path `x_path` driven by `noise`.
pub fn forward_flow(
    x_path: &SamplePath,
    y0: &HypoSurface,
    noise: &SamplePath,
    drift: &DriftField,
    rule: ReflectionRule,
) -> Result<ForwardFlow> {
    check_same_grid(x_path, noise)?;
    let grid = *x_path.grid();
    let mut stepper = ForwardStepper::new(y0.clone(), x_path.point(0), drift, rule, grid.dt())?;
    let mut sigma = vec![0.0; grid.steps() + 1];
    let mut triggered = vec![false; grid.steps()];
    let mut surfaces = SurfaceTrajectory::start(grid, y0.clone());
    let mut predictor = SamplePath::constant(grid, &stepper.predictor);
    for j in 1..=grid.steps() {
        let dw = noise.increment(j);
        let st = stepper.step(x_path.point(j - 1), x_path.point(j), &dw)?;
        sigma[j] = stepper.sigma;
        triggered[j - 1] = st.triggered;
        surfaces.surfaces.push(stepper.surface.clone());
        predictor.point_mut(j).copy_from_slice(&stepper.predictor);
    }
    let gaps = (0..=grid.steps()).map(|j| surfaces.at(j).gap(x_path.point(j))).collect();
    let flow = FlowOutput {
        reflected_noise: with_first_shifted(noise, &sigma),
        sigma,
        trajectory: x_path.clone(),
        outside: stepper.outside(),
        triggered,
        gaps,
    };
    Ok(ForwardFlow { flow, surfaces, predictor })
}

/// Noise that reproduces `x_path` under the implicit scheme:
/// w_j - w_{j-1} = X_j - X_{j-1} - beta(X_j) dt.
pub fn impute_noise(x_path: &SamplePath, drift: &DriftField) -> Result<SamplePath> {
    let n = x_path.dim();
    crate::error::check_dim(drift.dim(), n)?;
    let grid = *x_path.grid();
    let dt = grid.dt();
    let mut out = SamplePath::constant(grid, &vec![0.0; n]);
    let mut beta = vec![0.0; n];
    for j in 1..=grid.steps() {
        drift.eval_into(x_path.point(j), &mut beta);
        for i in 0..n {
            let v = out.point(j - 1)[i] + x_path.increment_coord(j, i) - beta[i] * dt;
            out.point_mut(j)[i] = v;
        }
    }
    Ok(out)
}

/// Reflected noise of the forward flow applied to `x_path`: the flipped noise
/// when the path starts outside `y0`, the noise minus local time otherwise.
pub fn tilde_theta(y0: &HypoSurface, x_path: &SamplePath, drift: &DriftField, rule: ReflectionRule) -> Result<SamplePath> {
    let noise = impute_noise(x_path, drift)?;
    Ok(forward_flow(x_path, y0, &noise, drift, rule)?.flow.reflected_noise)
}

/// Counts how often the printed forward trigger (surface at the left grid
/// time) and the alternative (unreflected surface at the right grid time)
/// disagree along a forward flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TriggerComparison {
    pub steps: usize,
    pub printed: usize,
    pub alternative: usize,
    pub disagreements: usize,
}

pub fn compare_trigger_variants(
    x_path: &SamplePath,
    y0: &HypoSurface,
    drift: &DriftField,
    rule: ReflectionRule,
) -> Result<TriggerComparison> {
    let noise = impute_noise(x_path, drift)?;
    let grid = *x_path.grid();
    let dt = grid.dt();
    let mut stepper = ForwardStepper::new(y0.clone(), x_path.point(0), drift, rule, dt)?;
    let mut out = TriggerComparison { steps: grid.steps(), printed: 0, alternative: 0, disagreements: 0 };
    let mut beta = vec![0.0; x_path.dim()];
    for j in 1..=grid.steps() {
        let dw = noise.increment(j);
        let x_next = x_path.point(j);
        drift.eval_into(x_next, &mut beta);
        let mut flipped = dw.clone();
        flipped[0] = -dw[0];
        let candidate = stepper.surface.step(&flipped, dt, drift)?;
        let height_next = x_next[0] + candidate.gap(x_next);
        let alt = !stepper.outside() && x_next[0] - beta[0] * dt + dw[0].abs() > height_next;
        let st = stepper.step(x_path.point(j - 1), x_next, &dw)?;
        out.printed += st.triggered as usize;
        out.alternative += alt as usize;
        out.disagreements += (st.triggered != alt) as usize;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::euler::{euler_backward, euler_forward_implicit};
    use crate::grid::{sample_brownian, TimeGrid};
    use crate::rng::RngSpec;

    #[test]
    fn skorohod_examples() {
        let r = solve_skorohod_1d(&[1.0, 1.5, 2.0]).unwrap();
        assert_eq!(r.ell, vec![0.0; 3]);
        assert_eq!(r.eta, vec![1.0, 1.5, 2.0]);
        let r = solve_skorohod_1d(&[0.0, -1.0, 0.5, -2.0]).unwrap();
        assert_eq!(r.ell, vec![0.0, 1.0, 1.0, 2.0]);
        assert_eq!(r.eta, vec![0.0, 0.0, 1.5, 0.0]);
        let k: Vec<f64> = (0..5).map(|i| -(i as f64) * 0.1).collect();
        let r = solve_skorohod_1d(&k).unwrap();
        assert!(r.eta.iter().all(|e| e.abs() < 1e-15));
        assert!(solve_skorohod_1d(&[-0.1]).is_err());
        assert_eq!(r.complementarity(), 0.0);
    }

    #[test]
    fn impute_inverts_implicit_scheme() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let w = sample_brownian(&g, 2, RngSpec::new(1, 0));
        let d = DriftField::Bilinear2D;
        let x = euler_forward_implicit(&[0.2, 0.1], &w, &d).unwrap();
        assert!(impute_noise(&x, &d).unwrap().sup_distance(&w) < 1e-10);
        let zero = DriftField::Constant { mu: vec![0.0] };
        let p = sample_brownian(&g, 1, RngSpec::new(2, 0));
        assert!(impute_noise(&p, &zero).unwrap().sup_distance(&p) < 1e-15);
    }

    #[test]
    fn impute_constant_drift_by_hand() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let x = SamplePath::from_values(g, 1, vec![0.0, 1.0, 0.5]).unwrap();
        let w = impute_noise(&x, &DriftField::Constant { mu: vec![0.5] }).unwrap();
        assert_eq!(w.coord(0), vec![0.0, 0.75, 0.0]);
    }

    #[test]
    fn outside_start_flips_noise() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let d = DriftField::Constant { mu: vec![0.5] };
        let w = sample_brownian(&g, 1, RngSpec::new(3, 0));
        let x = euler_backward(&[1.0], &w, &d).unwrap();
        let out = tilde_theta(&HypoSurface::constant(0.3), &x, &d, ReflectionRule::WholeStep).unwrap();
        let omega = impute_noise(&x, &d).unwrap();
        for j in 0..=100 {
            assert!((out.point(j)[0] + omega.point(j)[0]).abs() < 1e-15);
        }
        let ff = forward_flow(&x, &HypoSurface::constant(0.3), &omega, &d, ReflectionRule::WholeStep).unwrap();
        assert!(ff.flow.outside);
        // surfaces evolve with the flip of the flipped noise, i.e. with omega itself
        for j in 0..=100 {
            let HypoSurface::Constant1D { level } = ff.surfaces.at(j) else { unreachable!() };
            assert!((level - (0.3 + 0.5 * g.time(j) + omega.point(j)[0])).abs() < 1e-12);
        }
        let b = backward_flow(&[1.0], &ff.surfaces.reversed(), &w, &d, ReflectionRule::WholeStep);
        assert!(b.is_ok());
    }

    #[test]
    fn grid_projection_matches_running_minimum() {
        let g = TimeGrid::new(1.0, 500).unwrap();
        let d = DriftField::Constant { mu: vec![0.5] };
        let y = 0.3;
        for seed in 0..20 {
            let w = sample_brownian(&g, 1, RngSpec::new(seed, 0));
            let x = euler_backward(&[0.0], &w, &d).unwrap();
            let omega = impute_noise(&x, &d).unwrap();
            let out = tilde_theta(&HypoSurface::constant(y), &x, &d, ReflectionRule::GridProjection).unwrap();
            let kappa: Vec<f64> = omega.coord(0).iter().map(|o| y - x.point(0)[0] - 2.0 * o).collect();
            let ell = solve_skorohod_1d(&kappa).unwrap().ell;
            for j in 0..=500 {
                let expect = omega.point(j)[0] - ell[j];
                assert!((out.point(j)[0] - expect).abs() < 1e-10, "seed {seed} j {j} {} {expect} {}", out.point(j)[0], ell[j]);
            }
        }
    }

    #[test]
    fn quiet_noise_never_reflects() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let d = DriftField::Constant { mu: vec![0.1] };
        let w = sample_brownian(&g, 1, RngSpec::new(4, 0));
        let high = SurfaceTrajectory::evolve(g, HypoSurface::constant(100.0), &w.flip_first(), &d).unwrap();
        let out = backward_flow(&[0.0], &high.reversed(), &w, &d, ReflectionRule::WholeStep).unwrap();
        assert!(out.sigma.iter().all(|s| *s == 0.0));
        assert_eq!(out.trajectory, euler_backward(&[0.0], &w, &d).unwrap());
    }

    #[test]
    fn forward_containment_and_sigma_monotone() {
        let g = TimeGrid::new(1.0, 400).unwrap();
        let d = DriftField::Constant { mu: vec![0.5] };
        for rule in [ReflectionRule::WholeStep, ReflectionRule::GridProjection] {
            for seed in 0..50 {
                let w = sample_brownian(&g, 1, RngSpec::new(seed, 1));
                let x = euler_backward(&[0.0], &w, &d).unwrap();
                let omega = impute_noise(&x, &d).unwrap();
                let ff = forward_flow(&x, &HypoSurface::constant(0.2), &omega, &d, rule).unwrap();
                for j in 0..=400 {
                    assert!(ff.surfaces.at(j).contains(x.point(j)), "{rule:?} seed {seed} j {j}");
                }
                assert!(ff.flow.sigma.windows(2).all(|w| w[1] >= w[0]));
                for j in 1..=400 {
                    if ff.flow.triggered[j - 1] && ff.flow.sigma[j] > ff.flow.sigma[j - 1] {
                        assert!(omega.increment_coord(j, 0) > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn predictor_restarts_on_the_surface() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let d = DriftField::Constant { mu: vec![0.3] };
        let w = sample_brownian(&g, 1, RngSpec::new(6, 0));
        let x = euler_backward(&[0.0], &w, &d).unwrap();
        let omega = impute_noise(&x, &d).unwrap();
        let ff = forward_flow(&x, &HypoSurface::constant(0.1), &omega, &d, ReflectionRule::WholeStep).unwrap();
        // In one dimension the predictor is the surface level itself.
        for j in 0..=200 {
            let HypoSurface::Constant1D { level } = ff.surfaces.at(j) else { unreachable!() };
            assert!((ff.predictor.point(j)[0] - level).abs() < 1e-10);
        }
    }

    #[test]
    fn trigger_comparison_runs() {
        let g = TimeGrid::new(1.0, 300).unwrap();
        let d = DriftField::Constant { mu: vec![0.5] };
        let w = sample_brownian(&g, 1, RngSpec::new(8, 0));
        let x = euler_backward(&[0.0], &w, &d).unwrap();
        let c = compare_trigger_variants(&x, &HypoSurface::constant(0.2), &d, ReflectionRule::WholeStep).unwrap();
        assert_eq!(c.steps, 300);
        assert!(c.printed >= c.disagreements.saturating_sub(c.alternative));
    }
}
