//! Explicit and implicit Euler path schemes.
//!
//! The explicit scheme `x - beta(x) dt + dw` integrates the primal diffusion
//! with drift `-beta`. The implicit scheme solves `x_j = x_{j-1} + beta(x_j) dt + dw_j`
//! and is the exact inverse of the explicit one under time reversal of the
//! noise.

use crate::drift::DriftField;
use crate::error::{check_dim, Error, Result};
use crate::grid::{SamplePath, TimeGrid};
use crate::rng::RngSpec;

/// phi_u(z) = z - beta(z) u + (noise increment over [0, u]).
pub fn phi_step(drift: &DriftField, z: &[f64], u: f64, noise_increment: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    drift.explicit_step_into(z, noise_increment, u, &mut out);
    out
}

/// Explicit Euler path driven by `noise` with drift frozen at the left point.
pub fn euler_backward(x_start: &[f64], noise: &SamplePath, drift: &DriftField) -> Result<SamplePath> {
    let n = x_start.len();
    check_dim(drift.dim(), n)?;
    check_dim(n, noise.dim())?;
    let grid = *noise.grid();
    let dt = grid.dt();
    let mut out = SamplePath::constant(grid, x_start);
    let mut dw = vec![0.0; n];
    let mut next = vec![0.0; n];
    for j in 1..=grid.steps() {
        for (i, d) in dw.iter_mut().enumerate() {
            *d = noise.increment_coord(j, i);
        }
        drift.explicit_step_into(out.point(j - 1), &dw, dt, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { time: grid.time(j) });
        }
        out.point_mut(j).copy_from_slice(&next);
    }
    Ok(out)
}

/// Implicit Euler path, x_j = x_{j-1} + beta(x_j) dt + dw_j.
pub fn euler_forward_implicit(x_start: &[f64], noise: &SamplePath, drift: &DriftField) -> Result<SamplePath> {
    let n = x_start.len();
    check_dim(drift.dim(), n)?;
    check_dim(n, noise.dim())?;
    let grid = *noise.grid();
    let dt = grid.dt();
    let mut out = SamplePath::constant(grid, x_start);
    let mut dw = vec![0.0; n];
    let mut next = vec![0.0; n];
    for j in 1..=grid.steps() {
        for (i, d) in dw.iter_mut().enumerate() {
            *d = noise.increment_coord(j, i);
        }
        drift.implicit_step_into(out.point(j - 1), &dw, dt, &mut next)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { time: grid.time(j) });
        }
        out.point_mut(j).copy_from_slice(&next);
    }
    Ok(out)
}

/// Fills in the noise on a grid refined by `refine` with Brownian bridges.
///
/// Power-of-two factors use nested midpoint splitting, so refining by 2k
/// extends the path refined by k rather than redrawing it.
pub fn refine_noise(noise: &SamplePath, refine: usize, rng: RngSpec) -> Result<SamplePath> {
    if refine == 0 {
        return Err(Error::Precondition("refinement factor must be at least 1".into()));
    }
    if refine == 1 {
        return Ok(noise.clone());
    }
    let grid = *noise.grid();
    let fine = grid.refine(refine)?;
    let n = noise.dim();
    let dt = grid.dt();
    let mut inc = vec![0.0; fine.steps() * n];
    let mut sub = vec![0.0; refine];
    for j in 1..=grid.steps() {
        for i in 0..n {
            let mut stream = rng.child(j as u64).child(i as u64).stream();
            let total = noise.increment_coord(j, i);
            if refine.is_power_of_two() {
                midpoint_fill(&mut sub, total, dt, &mut stream);
            } else {
                sequential_fill(&mut sub, total, dt, &mut stream);
            }
            for (k, v) in sub.iter().enumerate() {
                inc[((j - 1) * refine + k) * n + i] = *v;
            }
        }
    }
    SamplePath::from_increments(fine, noise.point(0), &inc)
}

fn midpoint_fill(sub: &mut [f64], total: f64, dt: f64, stream: &mut crate::rng::Stream) {
    // Breadth-first midpoint splitting: the first levels are shared by all
    // finer power-of-two refinements.
    let r = sub.len();
    sub[0] = total;
    let mut width = 1;
    let mut h = dt;
    while width < r {
        for k in (0..width).rev() {
            let whole = sub[k];
            let left = 0.5 * whole + 0.5 * h.sqrt() * stream.normal();
            sub[2 * k] = left;
            sub[2 * k + 1] = whole - left;
        }
        width *= 2;
        h *= 0.5;
    }
}

fn sequential_fill(sub: &mut [f64], total: f64, dt: f64, stream: &mut crate::rng::Stream) {
    let r = sub.len();
    let h = dt / r as f64;
    let mut remaining = total;
    let mut tau = dt;
    for v in sub.iter_mut().take(r - 1) {
        let mean = remaining * h / tau;
        let var = h * (tau - h) / tau;
        *v = mean + var.sqrt() * stream.normal();
        remaining -= *v;
        tau -= h;
    }
    sub[r - 1] = remaining;
}

/// Reference solution: explicit Euler on a grid refined by `refine`, with the
/// noise bridged in between, downsampled to the original grid.
pub fn strong_solve(
    x_start: &[f64],
    noise: &SamplePath,
    drift: &DriftField,
    refine: usize,
    rng: RngSpec,
) -> Result<SamplePath> {
    let fine = refine_noise(noise, refine, rng)?;
    euler_backward(x_start, &fine, drift)?.downsample(refine)
}

pub const DEFAULT_REFINE: usize = 8;

/// Gaussian kernel of Brownian motion with drift -mu.
pub fn transition_density_constant_drift(t: f64, x: f64, y: f64, mu: f64) -> Result<f64> {
    if t <= 0.0 || !t.is_finite() {
        return Err(Error::Domain(format!("transition density needs t > 0, got {t}")));
    }
    let z = y - x + mu * t;
    Ok((-z * z / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt())
}

/// Explicit Euler path in forward time from `x` driven by a fresh Brownian motion.
pub fn simulate_primal(x: &[f64], grid: &TimeGrid, drift: &DriftField, rng: RngSpec) -> Result<SamplePath> {
    let w = crate::grid::sample_brownian(grid, x.len(), rng);
    euler_backward(x, &w, drift)
}
