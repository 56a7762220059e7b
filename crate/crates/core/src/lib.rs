//! Simulation of drifting Brownian motions together with their Liggett and
//! intertwining duals.
//!
//! The primal process solves `dX = -beta(X) dt + dW` with `beta = grad gamma`,
//! so `nu = exp(-2 gamma)` is invariant. Dual states are parametric
//! hypographical surfaces (intervals, wedges and slabs) driven by Skorohod
//! reflection flows of the primal noise, and [`coupling`] runs the primal and
//! dual jointly so that `Gamma(X*, X)` holds at every grid time.
//!
//! Every random quantity is drawn from an [`RngSpec`], a `(seed, stream)` pair,
//! which keeps replica-parallel runs reproducible.

pub mod coupling;
pub mod drift;
pub mod duality;
pub mod error;
pub mod euler;
pub mod grid;
pub mod logistic;
pub mod quad;
pub mod rng;
pub mod skorohod;
pub mod stats;
pub mod suites;
pub mod surface;

pub use coupling::{CouplingOptions, CouplingTrajectory, Region, RegionSamplerConfig, RegionSamples};
pub use drift::DriftField;
pub use duality::{DualState, DualVariant, McEstimate};
pub use error::{Error, Result};
pub use grid::{SamplePath, TimeGrid};
pub use logistic::LogisticModel;
pub use rng::RngSpec;
pub use skorohod::{FlowOutput, ReflectionRule};
pub use stats::TestReport;
pub use surface::{HypoSurface, SurfaceTrajectory};
