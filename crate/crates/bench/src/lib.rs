//! Shared inputs for the criterion benches in `benches/`.

use duallink::grid::sample_brownian;
use duallink::{DriftField, DualState, RngSpec, SamplePath, TimeGrid};

pub fn grid(steps: usize) -> TimeGrid {
    TimeGrid::new(1.0, steps).expect("positive steps")
}

pub fn noise(steps: usize, dim: usize, seed: u64) -> SamplePath {
    sample_brownian(&grid(steps), dim, RngSpec::new(seed, 0))
}

pub fn constant(mu: f64) -> DriftField {
    DriftField::constant(vec![mu])
}

pub fn unit_interval() -> DualState {
    DualState::interval(-1.0, 1.0).expect("ordered levels")
}

pub fn wedge() -> DualState {
    DualState::wedge([0.3, 1.0], [0.0, 0.0], [1.0, 0.3]).expect("valid wedge")
}
