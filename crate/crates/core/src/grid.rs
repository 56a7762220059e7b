//! Uniform time grids and grid-valued sample paths.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::RngSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Grid time t_j. Computed as a ratio so that t_N is exactly the horizon.
    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.horizon
        } else {
            self.horizon * (j as f64 / self.steps as f64)
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|j| self.time(j)).collect()
    }

    pub fn refine(&self, factor: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps * factor)
    }

    /// Index of the last grid point at or before `t`.
    pub fn floor_index(&self, t: f64) -> usize {
        let k = (t / self.horizon * self.steps as f64).floor();
        (k.max(0.0) as usize).min(self.steps)
    }
}

/// An R^n-valued path stored at the N+1 grid points, linear in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl SamplePath {
    pub fn from_values(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("path dimension must be positive".into()));
        }
        check_dim((grid.steps() + 1) * dim, values.len())?;
        Ok(Self { grid, dim, values })
    }

    pub fn constant(grid: TimeGrid, point: &[f64]) -> Self {
        let mut values = Vec::with_capacity((grid.steps() + 1) * point.len());
        for _ in 0..=grid.steps() {
            values.extend_from_slice(point);
        }
        Self { grid, dim: point.len(), values }
    }

    /// Build from per-step increments starting at `start`.
    pub fn from_increments(grid: TimeGrid, start: &[f64], increments: &[f64]) -> Result<Self> {
        let dim = start.len();
        check_dim(grid.steps() * dim, increments.len())?;
        let mut values = Vec::with_capacity((grid.steps() + 1) * dim);
        values.extend_from_slice(start);
        for j in 0..grid.steps() {
            for i in 0..dim {
                let prev = values[j * dim + i];
                values.push(prev + increments[j * dim + i]);
            }
        }
        Ok(Self { grid, dim, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn point_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.point(self.grid.steps())
    }

    /// Increment over the j-th interval (t_{j-1}, t_j], j >= 1.
    pub fn increment(&self, j: usize) -> Vec<f64> {
        let (a, b) = (self.point(j - 1), self.point(j));
        b.iter().zip(a).map(|(b, a)| b - a).collect()
    }

    pub fn increment_coord(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.dim + i] - self.values[(j - 1) * self.dim + i]
    }

    pub fn coord(&self, i: usize) -> Vec<f64> {
        self.values.iter().skip(i).step_by(self.dim).copied().collect()
    }

    /// Piecewise-linear evaluation at an arbitrary time in [0, T].
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, self.grid.horizon());
        let j = self.grid.floor_index(t).min(self.grid.steps() - 1);
        let (t0, t1) = (self.grid.time(j), self.grid.time(j + 1));
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let (a, b) = (self.point(j), self.point(j + 1));
        a.iter().zip(b).map(|(a, b)| a + w * (b - a)).collect()
    }

    /// X(T - t) at grid points.
    pub fn reversed(&self) -> SamplePath {
        let mut values = Vec::with_capacity(self.values.len());
        for j in (0..=self.grid.steps()).rev() {
            values.extend_from_slice(self.point(j));
        }
        Self { grid: self.grid, dim: self.dim, values }
    }

    /// Reversed noise: w(s) = omega(T - s) - omega(T).
    pub fn reversed_noise(&self) -> SamplePath {
        let end = self.last().to_vec();
        let mut out = self.reversed();
        for j in 0..=self.grid.steps() {
            for (v, e) in out.point_mut(j).iter_mut().zip(&end) {
                *v -= e;
            }
        }
        out
    }

    /// Sign flip of the first coordinate.
    pub fn flip_first(&self) -> SamplePath {
        let mut out = self.clone();
        for j in 0..=self.grid.steps() {
            out.values[j * self.dim] = -out.values[j * self.dim];
        }
        out
    }

    /// Keep every `factor`-th grid point.
    pub fn downsample(&self, factor: usize) -> Result<SamplePath> {
        if factor == 0 || self.grid.steps() % factor != 0 {
            return Err(Error::InvalidGrid(format!(
                "cannot downsample {} steps by {factor}",
                self.grid.steps()
            )));
        }
        let grid = TimeGrid::new(self.grid.horizon(), self.grid.steps() / factor)?;
        let mut values = Vec::with_capacity((grid.steps() + 1) * self.dim);
        for j in 0..=grid.steps() {
            values.extend_from_slice(self.point(j * factor));
        }
        Ok(Self { grid, dim: self.dim, values })
    }

    /// Sup norm over grid points of the difference with another path.
    pub fn sup_distance(&self, other: &SamplePath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// max_j ||X(t_j)|| in the Euclidean norm.
    pub fn sup_norm(&self) -> f64 {
        (0..=self.grid.steps())
            .map(|j| norm(self.point(j)))
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x_{i}")));
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(self.dim + 1);
        for j in 0..=self.grid.steps() {
            row.clear();
            row.push(format!("{:?}", self.grid.time(j)));
            row.extend(self.point(j).iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`SamplePath::write_csv`]. The grid is
    /// recovered from the last time stamp and the row count.
    pub fn read_csv<R: Read>(input: R) -> Result<SamplePath> {
        let mut r = csv::Reader::from_reader(input);
        let dim = r.headers()?.len().saturating_sub(1);
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Data(format!("bad number {s:?}: {e}")))
            };
            times.push(parse(&rec[0])?);
            for i in 1..=dim {
                values.push(parse(&rec[i])?);
            }
        }
        if times.len() < 2 {
            return Err(Error::Data("path csv needs at least two rows".into()));
        }
        let grid = TimeGrid::new(*times.last().unwrap(), times.len() - 1)?;
        SamplePath::from_values(grid, dim, values)
    }

    /// Binary record: little-endian header (n, N, T, seed) then the values.
    pub fn write_binary<W: Write>(&self, mut out: W, seed: u64) -> Result<()> {
        out.write_all(&(self.dim as u64).to_le_bytes())?;
        out.write_all(&(self.grid.steps() as u64).to_le_bytes())?;
        out.write_all(&self.grid.horizon().to_le_bytes())?;
        out.write_all(&seed.to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Returns the path and the seed stored in the header.
    pub fn read_binary<R: Read>(mut input: R) -> Result<(SamplePath, u64)> {
        let mut word = [0u8; 8];
        let mut next = |input: &mut R| -> Result<[u8; 8]> {
            input.read_exact(&mut word)?;
            Ok(word)
        };
        let dim = u64::from_le_bytes(next(&mut input)?) as usize;
        let steps = u64::from_le_bytes(next(&mut input)?) as usize;
        let horizon = f64::from_le_bytes(next(&mut input)?);
        let seed = u64::from_le_bytes(next(&mut input)?);
        let grid = TimeGrid::new(horizon, steps)?;
        let mut values = Vec::with_capacity((steps + 1) * dim);
        for _ in 0..(steps + 1) * dim {
            values.push(f64::from_le_bytes(next(&mut input)?));
        }
        Ok((SamplePath::from_values(grid, dim, values)?, seed))
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Standard Brownian motion on the grid, started at the origin.
pub fn sample_brownian(grid: &TimeGrid, dim: usize, rng: RngSpec) -> SamplePath {
    let mut stream = rng.stream();
    let mut inc = vec![0.0; grid.steps() * dim];
    stream.fill_normal(&mut inc, grid.dt().sqrt());
    SamplePath::from_increments(*grid, &vec![0.0; dim], &inc)
        .expect("increment count matches grid by construction")
}
