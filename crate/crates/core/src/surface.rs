//! Parametric hypographical surfaces and their evolution.
//!
//! A surface is the graph of `h(x_2..x_n)`; a point belongs to the hypograph
//! when `x_1 <= h`. Surfaces move by the implicit step with sign-flipped
//! noise in the first coordinate, which maps the graph onto a graph of the
//! same family.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::drift::DriftField;
use crate::error::{check_dim, Error, Result};
use crate::grid::{dot, SamplePath, TimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "params")]
pub enum HypoSurface {
    Constant1D { level: f64 },
    /// Line through `anchor` with direction `u`, u2 > |u1|.
    Line2D { u: [f64; 2], anchor: [f64; 2] },
    /// Hyperplane through `anchor` with unit normal `normal`, normal[0] > 0.
    Hyperplane { normal: Vec<f64>, anchor: Vec<f64> },
}

impl HypoSurface {
    pub fn constant(level: f64) -> Self {
        HypoSurface::Constant1D { level }
    }

    pub fn line(u: [f64; 2], anchor: [f64; 2]) -> Result<Self> {
        if !(u[1] > u[0].abs()) {
            return Err(Error::Precondition(format!("line direction {u:?} needs u2 > |u1|")));
        }
        Ok(HypoSurface::Line2D { u, anchor })
    }

    /// Normalises `normal`; rejects a non-positive first coordinate.
    pub fn hyperplane(normal: &[f64], anchor: &[f64]) -> Result<Self> {
        check_dim(normal.len(), anchor.len())?;
        let len = dot(normal, normal).sqrt();
        if !(len > 0.0) || !(normal[0] / len > 0.0) {
            return Err(Error::Precondition(format!("hyperplane normal {normal:?} needs d1 > 0")));
        }
        Ok(HypoSurface::Hyperplane {
            normal: normal.iter().map(|v| v / len).collect(),
            anchor: anchor.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            HypoSurface::Constant1D { .. } => 1,
            HypoSurface::Line2D { .. } => 2,
            HypoSurface::Hyperplane { normal, .. } => normal.len(),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            HypoSurface::Constant1D { .. } => "Constant1D",
            HypoSurface::Line2D { .. } => "Line2D",
            HypoSurface::Hyperplane { .. } => "Hyperplane",
        }
    }

    /// Lipschitz constant of the graph function.
    pub fn lipschitz(&self) -> f64 {
        match self {
            HypoSurface::Constant1D { .. } => 0.0,
            HypoSurface::Line2D { u, .. } => (u[0] / u[1]).abs(),
            HypoSurface::Hyperplane { normal, .. } => dot(&normal[1..], &normal[1..]).sqrt() / normal[0],
        }
    }

    /// Graph value h at the trailing coordinates.
    pub fn evaluate(&self, rest: &[f64]) -> Result<f64> {
        check_dim(self.dim() - 1, rest.len())?;
        Ok(self.height(rest))
    }

    fn height(&self, rest: &[f64]) -> f64 {
        match self {
            HypoSurface::Constant1D { level } => *level,
            HypoSurface::Line2D { u, anchor } => anchor[0] + u[0] / u[1] * (rest[0] - anchor[1]),
            HypoSurface::Hyperplane { normal, anchor } => {
                let mut h = dot(normal, anchor);
                for (d, x) in normal[1..].iter().zip(rest) {
                    h -= d * x;
                }
                h / normal[0]
            }
        }
    }

    /// Height of the graph above x, measured along the first coordinate.
    pub fn gap(&self, x: &[f64]) -> f64 {
        self.height(&x[1..]) - x[0]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.gap(x) >= 0.0
    }

    /// One implicit step with noise increment `incr` (already the flipped,
    /// reflected increment).
    pub fn step(&self, incr: &[f64], dt: f64, drift: &DriftField) -> Result<HypoSurface> {
        Ok(match self {
            HypoSurface::Constant1D { level } => {
                let next = drift.implicit_step(&[*level], incr, dt)?;
                HypoSurface::Constant1D { level: next[0] }
            }
            HypoSurface::Line2D { u, anchor } => {
                let u = match drift {
                    DriftField::Bilinear2D => {
                        let det = 1.0 - dt * dt;
                        [(u[0] + dt * u[1]) / det, (u[1] + dt * u[0]) / det]
                    }
                    DriftField::Constant { .. } => *u,
                    _ => {
                        return Err(Error::Unsupported(
                            "line surfaces need an affine drift (bilinear or constant)".into(),
                        ))
                    }
                };
                let a = drift.implicit_step(anchor, incr, dt)?;
                HypoSurface::Line2D { u, anchor: [a[0], a[1]] }
            }
            HypoSurface::Hyperplane { normal, anchor } => HypoSurface::Hyperplane {
                normal: normal.clone(),
                anchor: drift.implicit_step(anchor, incr, dt)?,
            },
        })
    }

    fn check_shape(&self, step: usize) -> Result<()> {
        if let HypoSurface::Line2D { u, .. } = self {
            if !(u[1] > u[0].abs()) {
                return Err(Error::SurfaceDegenerate {
                    step,
                    detail: format!("direction {u:?} left the cone u2 > |u1|"),
                });
            }
        }
        Ok(())
    }
}

/// Surfaces at every grid time, all of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceTrajectory {
    pub grid: TimeGrid,
    pub surfaces: Vec<HypoSurface>,
}

#[derive(Serialize, Deserialize)]
struct SurfaceRecord {
    t: f64,
    #[serde(flatten)]
    surface: HypoSurface,
}

impl SurfaceTrajectory {
    pub fn start(grid: TimeGrid, initial: HypoSurface) -> Self {
        let mut surfaces = Vec::with_capacity(grid.steps() + 1);
        surfaces.push(initial);
        Self { grid, surfaces }
    }

    pub fn at(&self, j: usize) -> &HypoSurface {
        &self.surfaces[j]
    }

    pub fn is_complete(&self) -> bool {
        self.surfaces.len() == self.grid.steps() + 1
    }

    /// Time-reversed trajectory, indexed by s_k = T - t_{N-k}.
    pub fn reversed(&self) -> SurfaceTrajectory {
        SurfaceTrajectory { grid: self.grid, surfaces: self.surfaces.iter().rev().cloned().collect() }
    }

    /// Appends the surface for step j = len.
    pub fn push_step(&mut self, incr: &[f64], drift: &DriftField) -> Result<()> {
        let j = self.surfaces.len();
        let next = self.surfaces[j - 1].step(incr, self.grid.dt(), drift)?;
        next.check_shape(j)?;
        self.surfaces.push(next);
        Ok(())
    }

    /// Evolves the whole horizon with the given (already flipped) noise path.
    pub fn evolve(grid: TimeGrid, initial: HypoSurface, noise: &SamplePath, drift: &DriftField) -> Result<Self> {
        let mut traj = SurfaceTrajectory::start(grid, initial);
        for j in 1..=grid.steps() {
            traj.push_step(&noise.increment(j), drift)?;
        }
        Ok(traj)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (j, s) in self.surfaces.iter().enumerate() {
            let rec = SurfaceRecord { t: self.grid.time(j), surface: s.clone() };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut times = Vec::new();
        let mut surfaces: Vec<HypoSurface> = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SurfaceRecord = serde_json::from_str(&line)?;
            if let Some(first) = surfaces.first() {
                if first.variant_name() != rec.surface.variant_name() {
                    return Err(Error::Data("mixed surface variants in one trajectory".into()));
                }
            }
            times.push(rec.t);
            surfaces.push(rec.surface);
        }
        if surfaces.len() < 2 {
            return Err(Error::Data("surface trajectory needs at least two records".into()));
        }
        let grid = TimeGrid::new(*times.last().unwrap(), surfaces.len() - 1)?;
        Ok(Self { grid, surfaces })
    }
}

/// Evolves `traj` by step j >= 1 using the (already flipped) noise path.
pub fn evolve_surface(traj: &SurfaceTrajectory, noise: &SamplePath, drift: &DriftField, j: usize) -> Result<HypoSurface> {
    if j == 0 || j > traj.surfaces.len() {
        return Err(Error::Precondition(format!("cannot evolve to step {j}")));
    }
    let next = traj.surfaces[j - 1].step(&noise.increment(j), traj.grid.dt(), drift)?;
    next.check_shape(j)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::sample_brownian;
    use crate::logistic::toy_logistic_2d;
    use crate::rng::RngSpec;

    #[test]
    fn evaluation_examples() {
        assert_eq!(HypoSurface::constant(0.3).evaluate(&[]).unwrap(), 0.3);
        // theta = 0 gives a horizontal direction [sinh 0, cosh 0] = [0, 1].
        let l = HypoSurface::line([0.0, 1.0], [1.0, 0.0]).unwrap();
        assert_eq!(l.evaluate(&[5.0]).unwrap(), 1.0);
        let h = HypoSurface::hyperplane(&[1.0, 0.0, 0.0], &[0.4, 2.0, -3.0]).unwrap();
        assert_eq!(h.evaluate(&[7.0, 1.0]).unwrap(), 0.4);
        assert!(h.evaluate(&[1.0]).is_err());
    }

    #[test]
    fn containment_examples() {
        let s = HypoSurface::constant(0.0);
        assert!(s.contains(&[-1.0]));
        assert!(!s.contains(&[1e-9]));
        let d = [0.6, 0.8];
        let y = [0.3, -0.2];
        let h = HypoSurface::hyperplane(&d, &y).unwrap();
        assert!(h.contains(&y));
    }

    #[test]
    fn tilted_and_bad_shapes_rejected() {
        assert!(HypoSurface::line([1.0, 1.0], [0.0, 0.0]).is_err());
        assert!(HypoSurface::hyperplane(&[-0.6, 0.8], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn constant_level_follows_closed_form() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let w = sample_brownian(&g, 1, RngSpec::new(2, 0));
        let d = DriftField::Constant { mu: vec![0.5] };
        let traj = SurfaceTrajectory::evolve(g, HypoSurface::constant(0.2), &w.flip_first(), &d).unwrap();
        for j in 0..=100 {
            let HypoSurface::Constant1D { level } = traj.at(j) else { unreachable!() };
            assert!((level - (0.2 + 0.5 * g.time(j) - w.point(j)[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn line_direction_tracks_hyperbolic_flow() {
        let theta: f64 = 0.3;
        for n in [100usize, 400] {
            let g = TimeGrid::new(1.0, n).unwrap();
            let zero = SamplePath::constant(g, &[0.0, 0.0]);
            let s0 = HypoSurface::line([theta.sinh(), theta.cosh()], [0.0, 0.0]).unwrap();
            let traj = SurfaceTrajectory::evolve(g, s0, &zero, &DriftField::Bilinear2D).unwrap();
            let HypoSurface::Line2D { u, .. } = traj.at(n) else { unreachable!() };
            let exact = [(theta + 1.0).sinh(), (theta + 1.0).cosh()];
            for i in 0..2 {
                assert!((u[i] - exact[i]).abs() <= 10.0 / n as f64, "{u:?} {exact:?}");
            }
        }
    }

    #[test]
    fn hyperplane_moves_only_along_normal_for_logistic() {
        let m = toy_logistic_2d();
        let geo = m.geometry().unwrap().clone();
        let drift = DriftField::LogisticRegression(m.clone());
        let mut st = RngSpec::new(3, 0).stream();
        for _ in 0..50 {
            let x = [st.normal(), st.normal()];
            let c = 3.0 * st.normal();
            let shifted: Vec<f64> = x.iter().zip(&geo.normal).map(|(x, d)| x + c * d).collect();
            for j in 0..m.len() {
                assert!((dot(m.input(j), &x) - dot(m.input(j), &shifted)).abs() < 1e-12);
            }
            assert!(dot(&drift.eval(&x), &geo.normal).abs() < 1e-12);
        }
        let g = TimeGrid::new(1.0, 200).unwrap();
        let w = sample_brownian(&g, 2, RngSpec::new(9, 0));
        let s0 = HypoSurface::hyperplane(&geo.normal, &[0.1, 0.2]).unwrap();
        let traj = SurfaceTrajectory::evolve(g, s0, &w.flip_first(), &drift).unwrap();
        // <d, anchor> is a pure Brownian functional: <d, anchor(0) + flipped W>
        for j in [50, 200] {
            let HypoSurface::Hyperplane { normal, anchor } = traj.at(j) else { unreachable!() };
            let expect = dot(normal, &[0.1, 0.2]) + dot(normal, w.flip_first().point(j));
            assert!((dot(normal, anchor) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn flow_property_and_lipschitz_budget() {
        let g = TimeGrid::new(1.0, 60).unwrap();
        let w = sample_brownian(&g, 2, RngSpec::new(4, 0)).flip_first();
        let s0 = HypoSurface::line([0.2f64.sinh(), 0.2f64.cosh()], [0.5, 0.1]).unwrap();
        let full = SurfaceTrajectory::evolve(g, s0.clone(), &w, &DriftField::Bilinear2D).unwrap();
        let mut piece = SurfaceTrajectory::start(g, s0);
        for j in 1..=25 {
            piece.push_step(&w.increment(j), &DriftField::Bilinear2D).unwrap();
        }
        for j in 26..=60 {
            let next = evolve_surface(&piece, &w, &DriftField::Bilinear2D, j).unwrap();
            piece.surfaces.push(next);
        }
        assert_eq!(full, piece);
        assert!(full.surfaces.iter().all(|s| s.lipschitz() < 1.0));
    }

    #[test]
    fn jsonl_round_trip() {
        let g = TimeGrid::new(0.5, 10).unwrap();
        let w = sample_brownian(&g, 2, RngSpec::new(7, 0)).flip_first();
        let s0 = HypoSurface::line([0.1, 1.0], [0.3, -0.1]).unwrap();
        let traj = SurfaceTrajectory::evolve(g, s0, &w, &DriftField::Bilinear2D).unwrap();
        let mut buf = Vec::new();
        traj.write_jsonl(&mut buf).unwrap();
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"t\":0.0,\"variant\":\"Line2D\",\"params\""), "{first}");
        let back = SurfaceTrajectory::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
    }
}
