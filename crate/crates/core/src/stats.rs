//! Goodness-of-fit tests and closed-form reflection probabilities.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    /// Passes when the p-value exceeds the threshold.
    PValue,
    /// Passes when the residual is at most the threshold.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub name: String,
    pub kind: ReportKind,
    pub statistic: f64,
    /// p-value or residual, per `kind`.
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub sample_size: usize,
    pub seeds: Vec<u64>,
}

impl TestReport {
    pub fn p_value(name: impl Into<String>, statistic: f64, p: f64, threshold: f64, n: usize) -> Self {
        Self {
            name: name.into(),
            kind: ReportKind::PValue,
            statistic,
            value: p,
            threshold,
            pass: p > threshold,
            sample_size: n,
            seeds: Vec::new(),
        }
    }

    pub fn residual(name: impl Into<String>, statistic: f64, residual: f64, threshold: f64, n: usize) -> Self {
        Self {
            name: name.into(),
            kind: ReportKind::Residual,
            statistic,
            value: residual,
            threshold,
            pass: residual <= threshold,
            sample_size: n,
            seeds: Vec::new(),
        }
    }

    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn summary_line(&self) -> String {
        let what = match self.kind {
            ReportKind::PValue => format!("p = {:.4} (> {})", self.value, self.threshold),
            ReportKind::Residual => format!("residual = {:.3e} (<= {:.3e})", self.value, self.threshold),
        };
        format!("[{}] {}: {what}, n = {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.sample_size)
    }
}

pub fn write_reports_jsonl<W: Write>(reports: &[TestReport], mut out: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn summary_table(reports: &[TestReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&r.summary_line());
        s.push('\n');
    }
    s
}

/// Asymptotic Kolmogorov distribution tail P(K > lambda).
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_p(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_tail((s + 0.12 + 0.11 / s) * d)
}

fn sorted_checked(samples: &[f64], min: usize) -> Result<Vec<f64>> {
    if samples.len() < min {
        return Err(Error::Precondition(format!("need at least {min} samples, got {}", samples.len())));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateInput("non-finite sample".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    if xs[0] == xs[xs.len() - 1] {
        return Err(Error::DegenerateInput("all samples are equal".into()));
    }
    Ok(xs)
}

/// Two-sided one-sample KS test against `cdf` with the asymptotic p-value.
pub fn ks_test<F: Fn(f64) -> f64>(name: &str, samples: &[f64], cdf: F, threshold: f64) -> Result<TestReport> {
    let xs = sorted_checked(samples, 20)?;
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    Ok(TestReport::p_value(name, d, ks_p(d, n), threshold, xs.len()))
}

/// Two-sample KS test.
pub fn ks_two_sample(name: &str, a: &[f64], b: &[f64], threshold: f64) -> Result<TestReport> {
    let xa = sorted_checked(a, 20)?;
    let xb = sorted_checked(b, 20)?;
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < xa.len() && j < xb.len() {
        let v = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= v {
            i += 1;
        }
        while j < xb.len() && xb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(TestReport::p_value(name, d, ks_p(d, na * nb / (na + nb)), threshold, xa.len() + xb.len()))
}

/// Pearson chi-square test of counts against cell probabilities.
pub fn chi_square_test(name: &str, observed: &[u64], probs: &[f64], threshold: f64) -> Result<TestReport> {
    if observed.len() != probs.len() || observed.len() < 2 {
        return Err(Error::Precondition("need matching counts and probabilities, at least two cells".into()));
    }
    let total: u64 = observed.iter().sum();
    let psum: f64 = probs.iter().sum();
    if total == 0 || !(psum > 0.0) {
        return Err(Error::DegenerateInput("empty histogram".into()));
    }
    let n = total as f64;
    let stat: f64 = observed
        .iter()
        .zip(probs)
        .map(|(o, p)| {
            let e = n * p / psum;
            (*o as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(TestReport::p_value(name, stat, dist.sf(stat), threshold, total as usize))
}

/// Equal-width histogram counts of `xs` on [lo, hi].
pub fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for x in xs {
        let k = (((x - lo) / (hi - lo)) * bins as f64).floor();
        let k = (k.max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// CDF of the chi law with three degrees of freedom (Bessel-3 at time 1).
pub fn chi3_cdf(r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let phi = (-0.5 * r * r).exp() / (2.0 * std::f64::consts::PI).sqrt();
    statrs::function::erf::erf(r / std::f64::consts::SQRT_2) - 2.0 * r * phi
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReflectionProbabilities {
    /// P(z < X(T) <= y) for X(T) = x - mu T + W(T).
    pub p_identity: f64,
    /// P(W(T) > z - x + mu T).
    pub p_above_z: f64,
    /// P(W(T) > y - x + mu T).
    pub p_above_y: f64,
}

pub fn reflection_probabilities(t: f64, x: f64, z: f64, y: f64, mu: f64) -> Result<ReflectionProbabilities> {
    if !(t > 0.0) || !(z < y) || x.is_nan() || mu.is_nan() {
        return Err(Error::Domain(format!("need T > 0 and z < y, got T = {t}, ({z}, {y})")));
    }
    let s = t.sqrt();
    let cz = normal_cdf((z - x + mu * t) / s);
    let cy = normal_cdf((y - x + mu * t) / s);
    Ok(ReflectionProbabilities { p_identity: cy - cz, p_above_z: 1.0 - cz, p_above_y: 1.0 - cy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSpec;

    #[test]
    fn reflection_examples() {
        let r = reflection_probabilities(1.0, 0.0, -1.0, 1.0, 0.5).unwrap();
        assert!((r.p_identity - 0.62465).abs() < 1e-5);
        assert!((r.p_above_z - r.p_above_y - r.p_identity).abs() < 1e-15);
        let r = reflection_probabilities(2.0, 0.3, f64::NEG_INFINITY, 1.0, 0.2).unwrap();
        assert!((r.p_identity - normal_cdf((1.0 - 0.3 + 0.4) / 2f64.sqrt())).abs() < 1e-15);
        let r = reflection_probabilities(1.5, 0.0, -0.7, 0.7, 0.0).unwrap();
        assert!((r.p_identity - (2.0 * normal_cdf(0.7 / 1.5f64.sqrt()) - 1.0)).abs() < 1e-14);
        assert!(reflection_probabilities(0.0, 0.0, -1.0, 1.0, 0.0).is_err());
        assert!(reflection_probabilities(1.0, 0.0, 1.0, 1.0, 0.0).is_err());
    }

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut s = RngSpec::new(seed, 0).stream();
        (0..n).map(|_| s.normal()).collect()
    }

    #[test]
    fn ks_accepts_and_rejects() {
        let xs = normals(1, 10_000);
        assert!(ks_test("n", &xs, normal_cdf, 0.01).unwrap().pass);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.5).collect();
        assert!(ks_test("s", &shifted, normal_cdf, 0.01).unwrap().value < 1e-6);
        assert!(matches!(ks_test("d", &[1.0; 30], normal_cdf, 0.01), Err(Error::DegenerateInput(_))));
        assert!(ks_test("few", &xs[..10], normal_cdf, 0.01).is_err());
    }

    #[test]
    fn ks_small_sample_calibration() {
        let mut ps: Vec<f64> = (0..100)
            .map(|seed| {
                let mut s = RngSpec::new(seed, 3).stream();
                let u: Vec<f64> = (0..20).map(|_| s.uniform()).collect();
                ks_test("u", &u, |x| x.clamp(0.0, 1.0), 0.01).unwrap().value
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        let median = 0.5 * (ps[49] + ps[50]);
        assert!((0.2..=0.8).contains(&median), "median {median}");
    }

    #[test]
    fn two_sample_ks() {
        let a = normals(2, 5000);
        let b = normals(3, 5000);
        assert!(ks_two_sample("same", &a, &b, 0.01).unwrap().pass);
        let c: Vec<f64> = b.iter().map(|x| x * 1.3).collect();
        assert!(!ks_two_sample("wider", &a, &c, 0.01).unwrap().pass);
    }

    #[test]
    fn chi_square_uniform() {
        let mut s = RngSpec::new(4, 0).stream();
        let u: Vec<f64> = (0..10_000).map(|_| s.uniform()).collect();
        let r = chi_square_test("u", &histogram(&u, 0.0, 1.0, 20), &[0.05; 20], 0.01).unwrap();
        assert!(r.pass);
        let skew: Vec<f64> = u.iter().map(|x| x * x).collect();
        assert!(!chi_square_test("s", &histogram(&skew, 0.0, 1.0, 20), &[0.05; 20], 0.01).unwrap().pass);
    }

    #[test]
    fn chi3_cdf_matches_statrs_chi() {
        use statrs::distribution::Chi;
        let chi = Chi::new(3).unwrap();
        for r in [0.1, 0.5, 1.0, 1.7, 3.0] {
            assert!((chi3_cdf(r) - chi.cdf(r)).abs() < 1e-9, "{r} {} {}", chi3_cdf(r), chi.cdf(r));
        }
    }

    #[test]
    fn report_pass_semantics() {
        assert!(TestReport::p_value("a", 0.1, 0.02, 0.01, 10).pass);
        assert!(!TestReport::p_value("a", 0.1, 0.01, 0.01, 10).pass);
        assert!(TestReport::residual("b", 0.0, 0.01, 0.01, 10).pass);
        let mut buf = Vec::new();
        write_reports_jsonl(&[TestReport::residual("b", 0.0, 0.5, 0.01, 10)], &mut buf).unwrap();
        let back: TestReport = serde_json::from_slice(buf.strip_suffix(b"\n").unwrap()).unwrap();
        assert!(!back.pass);
    }
}
