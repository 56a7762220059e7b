//! Drift fields beta = grad(gamma) of characteristic diffusions.
//!
//! The primal process moves with drift `-beta` and the invariant function is
//! `nu = exp(-2 gamma)`. The implicit step `x = prev + beta(x) dt + dw` is the
//! inverse of the explicit primal step and drives every dual object.

use std::fmt;
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::grid::norm;
use crate::logistic::LogisticModel;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One coordinate of a product-form drift.
#[derive(Clone)]
pub enum Component1D {
    /// beta(x) = slope * x + offset
    Linear { slope: f64, offset: f64 },
    Custom {
        beta: ScalarFn,
        potential: Option<ScalarFn>,
        lipschitz: f64,
    },
}

impl Component1D {
    pub fn beta(&self, x: f64) -> f64 {
        match self {
            Component1D::Linear { slope, offset } => slope * x + offset,
            Component1D::Custom { beta, .. } => beta(x),
        }
    }

    pub fn potential(&self, x: f64) -> Option<f64> {
        match self {
            Component1D::Linear { slope, offset } => Some(0.5 * slope * x * x + offset * x),
            Component1D::Custom { potential, .. } => potential.as_ref().map(|g| g(x)),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Component1D::Linear { slope, .. } => slope.abs(),
            Component1D::Custom { lipschitz, .. } => *lipschitz,
        }
    }
}

impl fmt::Debug for Component1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component1D::Linear { slope, offset } => {
                write!(f, "Linear {{ slope: {slope}, offset: {offset} }}")
            }
            Component1D::Custom { lipschitz, .. } => write!(f, "Custom {{ lipschitz: {lipschitz} }}"),
        }
    }
}

#[derive(Clone)]
pub enum DriftField {
    Constant { mu: Vec<f64> },
    Product1D { components: Vec<Component1D> },
    /// beta(x) = [x2, x1], gamma = x1 x2.
    Bilinear2D,
    LogisticRegression(Arc<LogisticModel>),
    /// Central-difference gradient of an arbitrary potential.
    Numeric {
        potential: FieldFn,
        dim: usize,
        lipschitz: f64,
    },
}

impl fmt::Debug for DriftField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftField::Constant { mu } => write!(f, "Constant {{ mu: {mu:?} }}"),
            DriftField::Product1D { components } => write!(f, "Product1D {components:?}"),
            DriftField::Bilinear2D => write!(f, "Bilinear2D"),
            DriftField::LogisticRegression(m) => {
                write!(f, "LogisticRegression {{ n: {}, m: {} }}", m.dim(), m.len())
            }
            DriftField::Numeric { dim, lipschitz, .. } => {
                write!(f, "Numeric {{ dim: {dim}, lipschitz: {lipschitz} }}")
            }
        }
    }
}

/// Potentials with a known family; `gradient_drift` turns them into drifts.
#[derive(Clone)]
pub enum Potential {
    /// gamma(x) = <c, x>
    Linear(Vec<f64>),
    /// gamma(x) = sum_i k_i x_i^2 / 2
    Quadratic(Vec<f64>),
    /// gamma(x) = x1 x2
    Bilinear,
    Logistic(Arc<LogisticModel>),
    Custom {
        gamma: FieldFn,
        dim: usize,
        lipschitz: f64,
    },
}

impl Potential {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Linear(c) => c.iter().zip(x).map(|(c, x)| c * x).sum(),
            Potential::Quadratic(k) => k.iter().zip(x).map(|(k, x)| 0.5 * k * x * x).sum(),
            Potential::Bilinear => x[0] * x[1],
            Potential::Logistic(m) => m.gamma(x),
            Potential::Custom { gamma, .. } => gamma(x),
        }
    }
}

/// Drift of the characteristic diffusion for `potential`. Known families get
/// their analytic gradient, anything else falls back to central differences.
pub fn gradient_drift(potential: Potential, dim: usize) -> Result<DriftField> {
    let expected = match &potential {
        Potential::Linear(c) => c.len(),
        Potential::Quadratic(k) => k.len(),
        Potential::Bilinear => 2,
        Potential::Logistic(m) => m.dim(),
        Potential::Custom { dim, .. } => *dim,
    };
    check_dim(expected, dim)?;
    for probe in probe_points(dim) {
        let v = potential.value(&probe);
        if !v.is_finite() {
            return Err(Error::InvalidModel(format!(
                "potential is not finite at {probe:?}"
            )));
        }
    }
    Ok(match potential {
        Potential::Linear(c) => DriftField::Constant { mu: c },
        Potential::Quadratic(k) => DriftField::Product1D {
            components: k
                .into_iter()
                .map(|slope| Component1D::Linear { slope, offset: 0.0 })
                .collect(),
        },
        Potential::Bilinear => DriftField::Bilinear2D,
        Potential::Logistic(m) => DriftField::LogisticRegression(m),
        Potential::Custom { gamma, dim, lipschitz } => DriftField::Numeric {
            potential: gamma,
            dim,
            lipschitz,
        },
    })
}

fn probe_points(dim: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim], vec![0.5; dim]];
    for i in 0..dim {
        for s in [-1.0, 1.0] {
            let mut e = vec![0.0; dim];
            e[i] = s;
            pts.push(e);
        }
    }
    pts
}

impl DriftField {
    pub fn constant(mu: Vec<f64>) -> Self {
        DriftField::Constant { mu }
    }

    pub fn dim(&self) -> usize {
        match self {
            DriftField::Constant { mu } => mu.len(),
            DriftField::Product1D { components } => components.len(),
            DriftField::Bilinear2D => 2,
            DriftField::LogisticRegression(m) => m.dim(),
            DriftField::Numeric { dim, .. } => *dim,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            DriftField::Constant { .. } => 0.0,
            DriftField::Product1D { components } => {
                components.iter().map(|c| c.lipschitz()).fold(0.0, f64::max)
            }
            DriftField::Bilinear2D => 1.0,
            DriftField::LogisticRegression(m) => m.lipschitz(),
            DriftField::Numeric { lipschitz, .. } => *lipschitz,
        }
    }

    /// Constant drift vector if the field is constant.
    pub fn constant_mu(&self) -> Option<&[f64]> {
        match self {
            DriftField::Constant { mu } => Some(mu),
            _ => None,
        }
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            DriftField::Constant { mu } => out.copy_from_slice(mu),
            DriftField::Product1D { components } => {
                for ((o, c), x) in out.iter_mut().zip(components).zip(x) {
                    *o = c.beta(*x);
                }
            }
            DriftField::Bilinear2D => {
                out[0] = x[1];
                out[1] = x[0];
            }
            DriftField::LogisticRegression(m) => m.beta_into(x, out),
            DriftField::Numeric { potential, .. } => {
                let h = 1e-5 * (1.0 + norm(x));
                let mut probe = x.to_vec();
                for i in 0..x.len() {
                    probe[i] = x[i] + h;
                    let up = potential(&probe);
                    probe[i] = x[i] - h;
                    let down = potential(&probe);
                    probe[i] = x[i];
                    out[i] = (up - down) / (2.0 * h);
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, &mut out);
        out
    }

    /// gamma(x), when the family carries a potential.
    pub fn potential(&self, x: &[f64]) -> Option<f64> {
        match self {
            DriftField::Constant { mu } => Some(mu.iter().zip(x).map(|(m, x)| m * x).sum()),
            DriftField::Product1D { components } => components
                .iter()
                .zip(x)
                .map(|(c, x)| c.potential(*x))
                .sum::<Option<f64>>(),
            DriftField::Bilinear2D => Some(x[0] * x[1]),
            DriftField::LogisticRegression(m) => Some(m.gamma(x)),
            DriftField::Numeric { potential, .. } => Some(potential(x)),
        }
    }

    /// Invariant function nu = exp(-2 gamma).
    pub fn nu(&self, x: &[f64]) -> Option<f64> {
        self.potential(x).map(|g| (-2.0 * g).exp())
    }

    /// Largest step for which the implicit map is a contraction.
    pub fn implicit_step_limit(&self) -> f64 {
        let k = self.lipschitz();
        if k == 0.0 {
            f64::INFINITY
        } else {
            1.0 / (2.0 * k)
        }
    }

    /// Explicit step x - beta(x) dt + dw.
    pub fn explicit_step_into(&self, x: &[f64], dw: &[f64], dt: f64, out: &mut [f64]) {
        self.eval_into(x, out);
        for i in 0..x.len() {
            out[i] = x[i] - out[i] * dt + dw[i];
        }
    }

    /// Solves x = prev + beta(x) dt + dw. This inverts the explicit step.
    pub fn implicit_step_into(&self, prev: &[f64], dw: &[f64], dt: f64, out: &mut [f64]) -> Result<()> {
        let limit = self.implicit_step_limit();
        if dt >= limit {
            return Err(Error::StepSize { dt, limit });
        }
        match self {
            DriftField::Constant { mu } => {
                for i in 0..prev.len() {
                    out[i] = prev[i] + mu[i] * dt + dw[i];
                }
                Ok(())
            }
            DriftField::Bilinear2D => {
                let (r0, r1) = (prev[0] + dw[0], prev[1] + dw[1]);
                let det = 1.0 - dt * dt;
                out[0] = (r0 + dt * r1) / det;
                out[1] = (r1 + dt * r0) / det;
                Ok(())
            }
            DriftField::Product1D { components } => {
                for (i, c) in components.iter().enumerate() {
                    let rhs = prev[i] + dw[i];
                    out[i] = match c {
                        Component1D::Linear { slope, offset } => (rhs + offset * dt) / (1.0 - slope * dt),
                        Component1D::Custom { beta, .. } => scalar_fixed_point(|x| rhs + beta(x) * dt, rhs)?,
                    };
                }
                Ok(())
            }
            DriftField::LogisticRegression(_) | DriftField::Numeric { .. } => {
                self.vector_fixed_point(prev, dw, dt, out)
            }
        }
    }

    pub fn implicit_step(&self, prev: &[f64], dw: &[f64], dt: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; prev.len()];
        self.implicit_step_into(prev, dw, dt, &mut out)?;
        Ok(out)
    }

    fn vector_fixed_point(&self, prev: &[f64], dw: &[f64], dt: f64, out: &mut [f64]) -> Result<()> {
        let n = prev.len();
        let mut b = vec![0.0; n];
        // Start from the explicit guess prev + beta(prev) dt + dw.
        self.eval_into(prev, &mut b);
        for i in 0..n {
            out[i] = prev[i] + b[i] * dt + dw[i];
        }
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_FIXED_POINT {
            self.eval_into(out, &mut b);
            residual = 0.0;
            for i in 0..n {
                let next = prev[i] + b[i] * dt + dw[i];
                residual = f64::max(residual, (next - out[i]).abs() / (1.0 + next.abs()));
                out[i] = next;
            }
            if residual <= FIXED_POINT_TOL {
                return Ok(());
            }
        }
        Err(Error::Solver { iterations: MAX_FIXED_POINT, residual })
    }
}

const MAX_FIXED_POINT: usize = 100;
const FIXED_POINT_TOL: f64 = 1e-12;

fn scalar_fixed_point(map: impl Fn(f64) -> f64, start: f64) -> Result<f64> {
    let mut x = start;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_FIXED_POINT {
        let next = map(x);
        residual = (next - x).abs() / (1.0 + next.abs());
        x = next;
        if residual <= FIXED_POINT_TOL {
            return Ok(x);
        }
    }
    Err(Error::Solver { iterations: MAX_FIXED_POINT, residual })
}
