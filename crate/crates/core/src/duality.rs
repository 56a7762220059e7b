//! Dual state spaces, the duality function, harmonic functions, link
//! samplers and the Liggett dual evolution.
//!
//! A dual state is a pair of parallel hypographs: the upper one through `y`
//! and the lower one through `z`. The duality function is the indicator of
//! the band between them, open at the lower surface and closed at the upper.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::DriftField;
use crate::error::{check_dim, Error, Result};
use crate::grid::{dot, TimeGrid};
use crate::quad::{integrate_adaptive, integrate_fixed};
use crate::rng::{RngSpec, Stream};
use crate::surface::HypoSurface;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DualVariant {
    Interval1D { z: f64, y: f64 },
    Wedge2D { u: [f64; 2], z: [f64; 2], y: [f64; 2] },
    Slab { z: Vec<f64>, y: Vec<f64>, normal: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub variant: DualVariant,
    pub absorbed: bool,
    pub zeta: Option<f64>,
}

fn live(variant: DualVariant) -> DualState {
    DualState { variant, absorbed: false, zeta: None }
}

fn unit_normal(normal: &[f64]) -> Result<Vec<f64>> {
    let len = dot(normal, normal).sqrt();
    if !(len > 0.0) || normal[0] <= 0.0 {
        return Err(Error::Domain(format!("slab normal {normal:?} needs d_1 > 0")));
    }
    Ok(normal.iter().map(|v| v / len).collect())
}

impl DualState {
    pub fn interval(z: f64, y: f64) -> Result<Self> {
        if !(z < y) {
            return Err(Error::Domain(format!("interval dual needs z < y, got ({z}, {y})")));
        }
        Ok(live(DualVariant::Interval1D { z, y }))
    }

    /// Wedge dual; the Liggett dual only needs |u_1| < u_2.
    pub fn wedge(u: [f64; 2], z: [f64; 2], y: [f64; 2]) -> Result<Self> {
        if !(u[1] > u[0].abs()) {
            return Err(Error::Domain(format!("wedge direction {u:?} needs |u_1| < u_2")));
        }
        let s = live(DualVariant::Wedge2D { u, z, y });
        if !(s.separation() > 0.0) {
            return Err(Error::Domain("wedge dual needs <[u2,-u1], y - z> > 0".into()));
        }
        Ok(s)
    }

    pub fn slab(z: Vec<f64>, y: Vec<f64>, normal: &[f64]) -> Result<Self> {
        check_dim(z.len(), y.len())?;
        check_dim(z.len(), normal.len())?;
        let s = live(DualVariant::Slab { z, y, normal: unit_normal(normal)? });
        if !(s.separation() > 0.0) {
            return Err(Error::Domain("slab dual needs <d, y - z> > 0".into()));
        }
        Ok(s)
    }

    /// Degenerate start (x, x) on the boundary of the dual space.
    pub fn entrance_interval(x: f64) -> Self {
        live(DualVariant::Interval1D { z: x, y: x })
    }

    pub fn entrance_wedge(u: [f64; 2], y: [f64; 2]) -> Result<Self> {
        if !(u[0] > 0.0 && u[1] > u[0]) {
            return Err(Error::Domain(format!("entrance wedge needs 0 < u_1 < u_2, got {u:?}")));
        }
        Ok(live(DualVariant::Wedge2D { u, z: y, y }))
    }

    pub fn entrance_slab(y: Vec<f64>, normal: &[f64]) -> Result<Self> {
        check_dim(y.len(), normal.len())?;
        Ok(live(DualVariant::Slab { z: y.clone(), y, normal: unit_normal(normal)? }))
    }

    pub fn dim(&self) -> usize {
        match &self.variant {
            DualVariant::Interval1D { .. } => 1,
            DualVariant::Wedge2D { .. } => 2,
            DualVariant::Slab { z, .. } => z.len(),
        }
    }

    pub fn z(&self) -> &[f64] {
        match &self.variant {
            DualVariant::Interval1D { z, .. } => std::slice::from_ref(z),
            DualVariant::Wedge2D { z, .. } => z,
            DualVariant::Slab { z, .. } => z,
        }
    }

    pub fn y(&self) -> &[f64] {
        match &self.variant {
            DualVariant::Interval1D { y, .. } => std::slice::from_ref(y),
            DualVariant::Wedge2D { y, .. } => y,
            DualVariant::Slab { y, .. } => y,
        }
    }

    /// The linear functional whose positivity defines the dual space.
    pub fn separation(&self) -> f64 {
        match &self.variant {
            DualVariant::Interval1D { z, y } => y - z,
            DualVariant::Wedge2D { u, z, y } => u[1] * (y[0] - z[0]) - u[0] * (y[1] - z[1]),
            DualVariant::Slab { z, y, normal } => {
                normal.iter().zip(y.iter().zip(z)).map(|(d, (y, z))| d * (y - z)).sum()
            }
        }
    }

    pub fn is_entrance(&self) -> bool {
        !self.absorbed && self.separation() == 0.0
    }

    /// Lower and upper boundary surfaces.
    pub fn surfaces(&self) -> (HypoSurface, HypoSurface) {
        match &self.variant {
            DualVariant::Interval1D { z, y } => (HypoSurface::Constant1D { level: *z }, HypoSurface::Constant1D { level: *y }),
            DualVariant::Wedge2D { u, z, y } => (
                HypoSurface::Line2D { u: *u, anchor: *z },
                HypoSurface::Line2D { u: *u, anchor: *y },
            ),
            DualVariant::Slab { z, y, normal } => (
                HypoSurface::Hyperplane { normal: normal.clone(), anchor: z.clone() },
                HypoSurface::Hyperplane { normal: normal.clone(), anchor: y.clone() },
            ),
        }
    }

    /// Reassembles a state from stepped surfaces of the same variant.
    fn from_surfaces(lower: HypoSurface, upper: HypoSurface) -> Result<Self> {
        let variant = match (lower, upper) {
            (HypoSurface::Constant1D { level: z }, HypoSurface::Constant1D { level: y }) => DualVariant::Interval1D { z, y },
            (HypoSurface::Line2D { u, anchor: z }, HypoSurface::Line2D { anchor: y, .. }) => DualVariant::Wedge2D { u, z, y },
            (HypoSurface::Hyperplane { normal, anchor: z }, HypoSurface::Hyperplane { anchor: y, .. }) => {
                DualVariant::Slab { z, y, normal }
            }
            _ => return Err(Error::Precondition("surface variants of a dual state differ".into())),
        };
        Ok(live(variant))
    }

    fn absorb(&mut self, time: f64) {
        self.absorbed = true;
        self.zeta = Some(time);
    }
}

/// Duality function: 1 iff x lies in the upper hypograph and strictly above the lower one.
pub fn gamma(state: &DualState, x: &[f64]) -> bool {
    if state.absorbed || x.len() != state.dim() {
        return false;
    }
    let (lower, upper) = state.surfaces();
    upper.contains(x) && !lower.contains(x)
}

fn expect_constant_1d(model: &DriftField) -> Option<f64> {
    match model.constant_mu() {
        Some([mu]) => Some(*mu),
        _ => None,
    }
}

/// Integral of exp(-2 mu x) over [z, y], scaled by exp(2 mu z).
fn scaled_exp_mass(mu: f64, len: f64) -> f64 {
    if mu == 0.0 {
        len
    } else {
        -(-2.0 * mu * len).exp_m1() / (2.0 * mu)
    }
}

/// Largest |eta| for which exp(eta^2) is integrated directly.
const WEDGE_ETA_LIMIT: f64 = 25.0;

/// Wedge bounds eta_z, eta_y; requires 0 < u_1 < u_2.
fn wedge_eta(u: &[f64; 2], z: &[f64; 2], y: &[f64; 2]) -> Result<(f64, f64)> {
    if !(u[0] > 0.0 && u[1] > u[0]) {
        return Err(Error::Domain(format!(
            "wedge direction {u:?} lies outside 0 < u_1 < u_2 where h is finite"
        )));
    }
    let s = (2.0 * u[0] * u[1]).sqrt();
    let ez = (u[1] * z[0] - u[0] * z[1]) / s;
    let ey = (u[1] * y[0] - u[0] * y[1]) / s;
    if ez.abs().max(ey.abs()) > WEDGE_ETA_LIMIT {
        return Err(Error::Domain(format!("wedge bounds ({ez}, {ey}) beyond |eta| = {WEDGE_ETA_LIMIT}")));
    }
    Ok((ez, ey))
}

/// int_a^b exp(eta^2) d eta, computed as exp(m^2) times a scaled integral.
fn exp_square_integral(a: f64, b: f64) -> Result<f64> {
    let m = a.abs().max(b.abs());
    let scaled = integrate_adaptive(|e| (e * e - m * m).exp(), a, b, 1e-12)?;
    Ok((m * m).exp() * scaled)
}

fn check_slab_model(model: &DriftField, normal: &[f64]) -> Result<()> {
    let DriftField::LogisticRegression(m) = model else {
        return Err(Error::InvalidModel("slab duals need a logistic regression model".into()));
    };
    let geo = m.geometry()?;
    if (dot(&geo.normal, normal) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidModel("slab normal differs from the normal of the input span".into()));
    }
    Ok(())
}

/// h(x*) = int Gamma(x*, x) nu(x) dx, up to a family constant for slabs.
pub fn harmonic_h(state: &DualState, model: &DriftField) -> Result<f64> {
    if state.absorbed {
        return Err(Error::Domain("h is undefined at the coffin state".into()));
    }
    match &state.variant {
        DualVariant::Interval1D { z, y } => {
            check_dim(1, model.dim())?;
            if let Some(mu) = expect_constant_1d(model) {
                return Ok((-2.0 * mu * z).exp() * scaled_exp_mass(mu, y - z));
            }
            if model.nu(&[*z]).is_none() {
                return Err(Error::InvalidModel("model has no potential".into()));
            }
            integrate_adaptive(|x| model.nu(&[x]).unwrap_or(f64::NAN), *z, *y, 1e-10)
        }
        DualVariant::Wedge2D { u, z, y } => {
            if !matches!(model, DriftField::Bilinear2D) {
                return Err(Error::InvalidModel("wedge duals need the bilinear model".into()));
            }
            let (ez, ey) = wedge_eta(u, z, y)?;
            Ok(std::f64::consts::PI.sqrt() * exp_square_integral(ez, ey)?)
        }
        DualVariant::Slab { normal, .. } => {
            check_slab_model(model, normal)?;
            Ok(state.separation())
        }
    }
}

/// Tabulated inverse CDF of an unnormalised density on [a, b].
#[derive(Debug, Clone)]
pub struct InverseCdfTable {
    knots: Vec<f64>,
    cdf: Vec<f64>,
}

impl InverseCdfTable {
    pub fn new<F: Fn(f64) -> f64>(log_density: F, a: f64, b: f64, points: usize) -> Result<Self> {
        if !(a < b) || points < 2 {
            return Err(Error::Sampler(format!("bad table range [{a}, {b}]")));
        }
        let knots: Vec<f64> = (0..points).map(|i| a + (b - a) * i as f64 / (points - 1) as f64).collect();
        let logs: Vec<f64> = knots.iter().map(|x| log_density(*x)).collect();
        let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(Error::Sampler("density is not finite on the table".into()));
        }
        let dens: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();
        let mut cdf = vec![0.0; points];
        for i in 1..points {
            cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (knots[i] - knots[i - 1]);
        }
        Ok(Self { knots, cdf })
    }

    pub fn sample(&self, stream: &mut Stream) -> f64 {
        self.quantile(stream.uniform())
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let target = p * self.cdf[self.cdf.len() - 1];
        let i = self.cdf.partition_point(|c| *c < target).clamp(1, self.knots.len() - 1);
        let span = self.cdf[i] - self.cdf[i - 1];
        let frac = if span > 0.0 { (target - self.cdf[i - 1]) / span } else { 0.5 };
        self.knots[i - 1] + frac * (self.knots[i] - self.knots[i - 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    pub point: Vec<f64>,
    /// log lambda(x*, x); for slabs the H-marginal is left unnormalised.
    pub log_density: f64,
}

const LINK_TABLE_POINTS: usize = 10_000;

/// Gaussian law of the coordinate along u given P = <[u2,-u1], x> on the wedge:
/// nu = exp(-2 x1 x2) restricted to the line is Gaussian in the coefficient of u.
fn wedge_line_point(u: &[f64; 2], p: f64, stream: &mut Stream) -> Vec<f64> {
    let uu = u[0] * u[0] + u[1] * u[1];
    let a = [u[1] / uu, -u[0] / uu];
    let c = (u[1] * u[1] - u[0] * u[0]) / uu;
    let prec = 4.0 * u[0] * u[1];
    let q = -p * c / (2.0 * u[0] * u[1]) + stream.normal() / prec.sqrt();
    vec![p * a[0] + q * u[0], p * a[1] + q * u[1]]
}

/// Draws X ~ lambda(x*, .) = Gamma(x*, .) nu / h(x*). Entrance states draw
/// from nu restricted to the boundary surface.
pub fn link_sample(state: &DualState, model: &DriftField, rng: RngSpec) -> Result<LinkSample> {
    link_sample_with(state, model, &mut rng.stream())
}

pub fn link_sample_with(state: &DualState, model: &DriftField, stream: &mut Stream) -> Result<LinkSample> {
    if state.absorbed {
        return Err(Error::Domain("cannot link from the coffin state".into()));
    }
    let entrance = state.is_entrance();
    let point = match &state.variant {
        DualVariant::Interval1D { z, y } => {
            if entrance {
                return Ok(LinkSample { point: vec![*y], log_density: 0.0 });
            }
            check_dim(1, model.dim())?;
            let x = if let Some(mu) = expect_constant_1d(model) {
                let u = stream.uniform();
                let len = y - z;
                // Invert from the endpoint where the density is largest so expm1 cannot overflow.
                if mu == 0.0 {
                    y - len * u
                } else if mu > 0.0 {
                    z + (u * (-2.0 * mu * len).exp_m1()).ln_1p() / (-2.0 * mu)
                } else {
                    y - (u * (2.0 * mu * len).exp_m1()).ln_1p() / (2.0 * mu)
                }
            } else {
                let table = InverseCdfTable::new(
                    |x| model.potential(&[x]).map_or(f64::NAN, |g| -2.0 * g),
                    *z,
                    *y,
                    LINK_TABLE_POINTS,
                )?;
                table.sample(stream)
            };
            vec![if x > *z { x.min(*y) } else { z + (y - z) * f64::EPSILON }]
        }
        DualVariant::Wedge2D { u, y, .. } => {
            if !matches!(model, DriftField::Bilinear2D) {
                return Err(Error::InvalidModel("wedge duals need the bilinear model".into()));
            }
            let (ez, ey) = wedge_eta(u, state.z().try_into().expect("2-D"), y)?;
            let s = (2.0 * u[0] * u[1]).sqrt();
            let eta = if entrance {
                ey
            } else {
                InverseCdfTable::new(|e| e * e, ez, ey, LINK_TABLE_POINTS)?.sample(stream)
            };
            wedge_line_point(u, eta * s, stream)
        }
        DualVariant::Slab { z, normal, .. } => {
            check_slab_model(model, normal)?;
            let DriftField::LogisticRegression(m) = model else { unreachable!() };
            let geo = m.geometry()?;
            let w = m.nu_h_sampler()?.sample(stream)?;
            let base = dot(normal, z);
            let offset = if entrance { 0.0 } else { state.separation() * (1.0 - stream.uniform()) };
            geo.embed(&w, base + offset)
        }
    };
    let log_nu = model
        .potential(&point)
        .map(|g| -2.0 * g)
        .ok_or_else(|| Error::InvalidModel("model has no potential".into()))?;
    let log_h = if entrance { 0.0 } else { harmonic_h(state, model)?.ln() };
    Ok(LinkSample { point, log_density: log_nu - log_h })
}

/// One step of the Liggett dual: the lower surface moves with the noise
/// increment, the upper with its first coordinate flipped. Absorption is
/// declared when the separation stops being positive, with the time located by
/// linear interpolation inside the step.
pub fn xi_star_step(state: &DualState, dw: &[f64], t_prev: f64, dt: f64, drift: &DriftField) -> Result<DualState> {
    if state.absorbed {
        return Ok(state.clone());
    }
    check_dim(state.dim(), dw.len())?;
    let (lower, upper) = state.surfaces();
    let mut flipped = dw.to_vec();
    flipped[0] = -dw[0];
    let next = DualState::from_surfaces(lower.step(dw, dt, drift)?, upper.step(&flipped, dt, drift)?)?;
    Ok(settle_absorption(state, next, t_prev, dt))
}

/// Same as `xi_star_step` with the lower and upper increments given separately.
pub fn xi_star_step_split(
    state: &DualState,
    lower_incr: &[f64],
    upper_incr: &[f64],
    t_prev: f64,
    dt: f64,
    drift: &DriftField,
) -> Result<DualState> {
    if state.absorbed {
        return Ok(state.clone());
    }
    let (lower, upper) = state.surfaces();
    let next = DualState::from_surfaces(lower.step(lower_incr, dt, drift)?, upper.step(upper_incr, dt, drift)?)?;
    Ok(settle_absorption(state, next, t_prev, dt))
}

fn settle_absorption(prev: &DualState, mut next: DualState, t_prev: f64, dt: f64) -> DualState {
    let s1 = next.separation();
    if s1 <= 0.0 {
        let s0 = prev.separation();
        let frac = if s0 - s1 > 0.0 { (s0 / (s0 - s1)).clamp(0.0, 1.0) } else { 0.0 };
        next.absorb(t_prev + frac * dt);
    }
    next
}

/// Liggett dual path on `grid` driven by fresh noise.
pub fn simulate_dual(state: &DualState, grid: &TimeGrid, drift: &DriftField, rng: RngSpec) -> Result<Vec<DualState>> {
    let mut stream = rng.stream();
    let sd = grid.dt().sqrt();
    let mut dw = vec![0.0; state.dim()];
    let mut out = Vec::with_capacity(grid.steps() + 1);
    out.push(state.clone());
    for j in 1..=grid.steps() {
        stream.fill_normal(&mut dw, sd);
        let next = xi_star_step(&out[j - 1], &dw, grid.time(j - 1), grid.dt(), drift)?;
        out.push(next);
    }
    Ok(out)
}

/// Drift of the h-transformed dual on (z, y).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualDrift {
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

/// 2 mu coth(mu L), with the series 2/L (1 + (mu L)^2 / 3) near zero.
pub fn doob_interval_correction(mu: f64, len: f64) -> f64 {
    let a = mu * len;
    if a.abs() < 1e-4 {
        2.0 / len * (1.0 + a * a / 3.0)
    } else {
        2.0 * mu / a.tanh()
    }
}

pub fn dual_generator_drift(state: &DualState, model: &DriftField) -> Result<DualDrift> {
    if state.absorbed {
        return Err(Error::Domain("coffin state has no drift".into()));
    }
    match &state.variant {
        DualVariant::Interval1D { z, y } => {
            let mu = expect_constant_1d(model)
                .ok_or_else(|| Error::Unsupported("Doob drift needs constant 1-D drift".into()))?;
            let extra = doob_interval_correction(mu, y - z);
            Ok(DualDrift { z: vec![mu - extra], y: vec![mu + extra] })
        }
        DualVariant::Slab { z, y, normal } => {
            check_slab_model(model, normal)?;
            let h = state.separation();
            let mut dz = model.eval(z);
            let mut dy = model.eval(y);
            dz[0] -= 2.0 * normal[0] / h;
            dy[0] += 2.0 * normal[0] / h;
            Ok(DualDrift { z: dz, y: dy })
        }
        DualVariant::Wedge2D { .. } => Err(Error::Unsupported("no closed-form Doob drift for wedge duals".into())),
    }
}

/// m(x*) with (d/dt) <h(X*)> = m^2: the rate of the Bessel time change.
pub fn bessel_rate(state: &DualState, model: &DriftField) -> Result<f64> {
    match &state.variant {
        DualVariant::Interval1D { z, y } => {
            let mu = expect_constant_1d(model)
                .ok_or_else(|| Error::Unsupported("closed-form m needs constant 1-D drift".into()))?;
            Ok((-2.0 * mu * y).exp() + (-2.0 * mu * z).exp())
        }
        DualVariant::Slab { normal, .. } => Ok(2.0 * normal[0]),
        DualVariant::Wedge2D { .. } => Err(Error::Unsupported("no closed-form m for wedge duals".into())),
    }
}

/// A twice differentiable scalar function with analytic derivatives.
#[derive(Clone, Copy)]
pub struct TestFunction {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub d1: fn(f64) -> f64,
    pub d2: fn(f64) -> f64,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

impl TestFunction {
    pub const ONE: TestFunction = TestFunction { name: "1", f: |_| 1.0, d1: |_| 0.0, d2: |_| 0.0 };
    pub const X: TestFunction = TestFunction { name: "x", f: |x| x, d1: |_| 1.0, d2: |_| 0.0 };
    pub const X2: TestFunction = TestFunction { name: "x^2", f: |x| x * x, d1: |x| 2.0 * x, d2: |_| 2.0 };
    pub const SIN: TestFunction = TestFunction { name: "sin", f: f64::sin, d1: f64::cos, d2: |x| -x.sin() };

    pub fn by_name(name: &str) -> Option<TestFunction> {
        [Self::ONE, Self::X, Self::X2, Self::SIN].into_iter().find(|t| t.name == name)
    }
}

const LINK_PANELS: usize = 4;

/// Lambda g at the interval (z, y] for constant drift mu.
pub fn link_expectation<G: Fn(f64) -> f64>(g: G, z: f64, y: f64, mu: f64) -> f64 {
    // Same rule for numerator and mass, so Lambda 1 = 1 exactly.
    let w = |x: f64| (-2.0 * mu * (x - z)).exp();
    integrate_fixed(|x| g(x) * w(x), z, y, LINK_PANELS) / integrate_fixed(w, z, y, LINK_PANELS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntertwiningReport {
    pub lambda_a_f: f64,
    pub b_star_lambda_f: f64,
    pub residual: f64,
}

pub const FD_STEP: f64 = 1e-4;

/// |Lambda A f - B* Lambda f| at an interval state under constant drift.
pub fn intertwining_residual(f: TestFunction, state: &DualState, model: &DriftField) -> Result<IntertwiningReport> {
    let DualVariant::Interval1D { z, y } = state.variant else {
        return Err(Error::Unsupported("intertwining check is implemented for interval duals".into()));
    };
    if state.absorbed || !(z < y) {
        return Err(Error::Domain("intertwining needs a live interior interval state".into()));
    }
    let mu = expect_constant_1d(model)
        .ok_or_else(|| Error::Unsupported("intertwining check needs constant 1-D drift".into()))?;
    let af = |x: f64| 0.5 * (f.d2)(x) - mu * (f.d1)(x);
    let lambda_a_f = link_expectation(af, z, y, mu);
    let lf = |z: f64, y: f64| link_expectation(f.f, z, y, mu);
    let e = FD_STEP;
    let drift = dual_generator_drift(state, model)?;
    let d_z = (lf(z + e, y) - lf(z - e, y)) / (2.0 * e);
    let d_y = (lf(z, y + e) - lf(z, y - e)) / (2.0 * e);
    let d_anti = (lf(z - e, y + e) - 2.0 * lf(z, y) + lf(z + e, y - e)) / (e * e);
    let b_star_lambda_f = drift.z[0] * d_z + drift.y[0] * d_y + 0.5 * d_anti;
    if !(lambda_a_f.is_finite() && b_star_lambda_f.is_finite()) {
        return Err(Error::Quadrature("non-finite intertwining terms".into()));
    }
    Ok(IntertwiningReport { lambda_a_f, b_star_lambda_f, residual: (lambda_a_f - b_star_lambda_f).abs() })
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_count(hits: u64, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        let se = if n > 1 { (p * (1.0 - p) / (n - 1) as f64).sqrt() } else { f64::INFINITY };
        Self { mean: p, se, n }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        Self { mean, se: (var / n as f64).sqrt(), n }
    }
}

/// Counts indicator successes over `paths` replicas in parallel; the count is
/// an integer so the result does not depend on the thread schedule.
pub fn mc_indicator<F>(paths: usize, f: F) -> Result<McEstimate>
where
    F: Fn(usize) -> Result<bool> + Sync,
{
    if paths == 0 {
        return Err(Error::Precondition("need at least one path".into()));
    }
    let hits = (0..paths)
        .into_par_iter()
        .map(|i| f(i).map(u64::from))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(McEstimate::from_count(hits, paths))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LiggettReport {
    pub lhs: McEstimate,
    pub rhs: McEstimate,
}

/// E[Gamma(x*, X(T))] over primal paths from x versus E[Gamma(X*(T), x)] over
/// Liggett dual paths from x*.
pub fn liggett_identity_mc(
    x: &[f64],
    state: &DualState,
    grid: &TimeGrid,
    paths: usize,
    model: &DriftField,
    rng: RngSpec,
) -> Result<LiggettReport> {
    let n = x.len();
    check_dim(state.dim(), n)?;
    check_dim(model.dim(), n)?;
    let dt = grid.dt();
    let sd = dt.sqrt();
    let primal = rng.child(1);
    let dual = rng.child(2);
    let lhs = mc_indicator(paths, |i| {
        let mut s = RngSpec::new(primal.seed, i as u64).stream();
        let mut cur = x.to_vec();
        let mut next = vec![0.0; n];
        let mut dw = vec![0.0; n];
        for j in 1..=grid.steps() {
            s.fill_normal(&mut dw, sd);
            model.explicit_step_into(&cur, &dw, dt, &mut next);
            std::mem::swap(&mut cur, &mut next);
            if !cur.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged { time: grid.time(j) });
            }
        }
        Ok(gamma(state, &cur))
    })?;
    let rhs = mc_indicator(paths, |i| {
        let mut s = RngSpec::new(dual.seed, i as u64).stream();
        let mut cur = state.clone();
        let mut dw = vec![0.0; n];
        for j in 1..=grid.steps() {
            s.fill_normal(&mut dw, sd);
            cur = xi_star_step(&cur, &dw, grid.time(j - 1), dt, model)?;
            if cur.absorbed {
                return Ok(false);
            }
        }
        Ok(gamma(&cur, x))
    })?;
    Ok(LiggettReport { lhs, rhs })
}
