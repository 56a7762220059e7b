//! Quadrature helpers: adaptive double-exponential for accuracy-critical
//! integrals, and a fixed composite Gauss-Legendre rule for smooth integrands
//! that get evaluated many times.

use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;

use crate::error::{Error, Result};

/// Integral of `f` over [a, b] to relative accuracy `rel_tol`.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Quadrature(format!("non-finite bounds [{a}, {b}]")));
    }
    let bad = std::cell::Cell::new(false);
    let f = |x: f64| {
        let v = f(x);
        if !v.is_finite() {
            bad.set(true);
        }
        v
    };
    let rough = quadrature::double_exponential::integrate(&f, a, b, 1e-6);
    if bad.get() || !rough.integral.is_finite() {
        return Err(Error::Quadrature("integrand is not finite".into()));
    }
    let target = (rel_tol * rough.integral.abs()).max(f64::MIN_POSITIVE);
    let fine = quadrature::double_exponential::integrate(&f, a, b, target);
    let scale = fine.integral.abs().max(f64::MIN_POSITIVE);
    if !fine.integral.is_finite() || fine.error_estimate > 10.0 * rel_tol * scale + 1e-300 {
        return Err(Error::Quadrature(format!(
            "error estimate {:e} above target {:e}",
            fine.error_estimate,
            rel_tol * scale
        )));
    }
    Ok(fine.integral)
}

const GL_DEGREE: usize = 48;

fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(NonZeroUsize::new(GL_DEGREE).expect("nonzero degree")))
}

/// Composite Gauss-Legendre rule with `panels` equal panels.
pub fn integrate_fixed<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|p| {
            let lo = a + p as f64 * h;
            rule().integrate(lo, lo + h, &mut f)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_and_exponentials() {
        let v = integrate_adaptive(|x| x * x, 0.0, 3.0, 1e-12).unwrap();
        assert!((v - 9.0).abs() < 1e-11);
        let v = integrate_adaptive(|x| (-x).exp(), -1.0, 1.0, 1e-12).unwrap();
        assert!((v - (1f64.exp() - (-1f64).exp())).abs() < 1e-11);
        let v = integrate_fixed(|x| x.sin(), 0.0, std::f64::consts::PI, 2);
        assert!((v - 2.0).abs() < 1e-13);
        assert_eq!(integrate_adaptive(|x| x, 1.0, 1.0, 1e-10).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        assert!(integrate_adaptive(|_| f64::NAN, 0.0, 1.0, 1e-10).is_err());
    }
}
