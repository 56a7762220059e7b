//! Bernoulli-logistic regression as a characteristic diffusion.
//!
//! With inputs a_j and labels b_j, gamma(x) = -1/2 sum_j log S((2 b_j - 1) <a_j, x>)
//! so that nu = exp(-2 gamma) is the likelihood. When the inputs span a
//! hyperplane H, nu is constant along the unit normal d of H and the posterior
//! restricted to H (written nu_H) can be proper.

use std::io::Read;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::dot;
use crate::rng::{RngSpec, Stream};

#[derive(Debug)]
pub struct LogisticModel {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<f64>,
    geometry: OnceLock<std::result::Result<HyperplaneGeometry, String>>,
    sampler: OnceLock<std::result::Result<NuHSampler, String>>,
}

/// log S(t) = -log(1 + e^{-t}), evaluated without overflow.
pub fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LogisticModel {
    pub fn new(dim: usize, inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::Data(format!(
                "need matching non-empty inputs and labels, got {} and {}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(b) = labels.iter().find(|b| **b != 0.0 && **b != 1.0) {
            return Err(Error::Data(format!("label {b} is not in {{0, 1}}")));
        }
        let mut flat = Vec::with_capacity(inputs.len() * dim);
        for (j, a) in inputs.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::Data(format!("row {j} has {} inputs, expected {dim}", a.len())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("row {j} has a non-finite input")));
            }
            flat.extend_from_slice(a);
        }
        Ok(Self {
            dim,
            inputs: flat,
            labels,
            geometry: OnceLock::new(),
            sampler: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, j: usize) -> &[f64] {
        &self.inputs[j * self.dim..(j + 1) * self.dim]
    }

    pub fn label(&self, j: usize) -> f64 {
        self.labels[j]
    }

    /// Quarter of the summed squared input norms (sigmoid slope is at most 1/4).
    pub fn lipschitz(&self) -> f64 {
        0.25 * self.inputs.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn beta_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..self.len() {
            let a = self.input(j);
            let c = 0.5 * (sigmoid(dot(a, x)) - self.labels[j]);
            for (o, a) in out.iter_mut().zip(a) {
                *o += c * a;
            }
        }
    }

    pub fn gamma(&self, x: &[f64]) -> f64 {
        -0.5 * self.log_nu(x)
    }

    /// Log-likelihood, i.e. log nu(x).
    pub fn log_nu(&self, x: &[f64]) -> f64 {
        (0..self.len())
            .map(|j| log_sigmoid((2.0 * self.labels[j] - 1.0) * dot(self.input(j), x)))
            .sum()
    }

    pub fn geometry(&self) -> Result<&HyperplaneGeometry> {
        self.geometry
            .get_or_init(|| HyperplaneGeometry::from_model(self).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::InvalidModel(e.clone()))
    }

    /// Sampler for nu restricted to H, built once per model.
    pub fn nu_h_sampler(&self) -> Result<&NuHSampler> {
        self.sampler
            .get_or_init(|| NuHSampler::new(self).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::Sampler(e.clone()))
    }
}

/// Unit normal d of the input span H (with d1 > 0) and an orthonormal basis of H.
#[derive(Debug, Clone)]
pub struct HyperplaneGeometry {
    pub normal: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
}

impl HyperplaneGeometry {
    pub fn from_model(m: &LogisticModel) -> Result<Self> {
        let n = m.dim();
        if n < 2 {
            return Err(Error::Data("hyperplane geometry needs dimension >= 2".into()));
        }
        let a = DMatrix::from_row_slice(m.len(), n, &m.inputs);
        let gram = a.transpose() * &a;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let top = eig.eigenvalues[order[n - 1]];
        let tol = 1e-10 * top.max(1e-300);
        let rank = eig.eigenvalues.iter().filter(|&&l| l > tol).count();
        if rank == n {
            return Err(Error::Data(format!(
                "inputs span all of R^{n}; nu is then not constant along any direction and \
                 the hyperplane dual does not apply"
            )));
        }
        if rank < n - 1 {
            return Err(Error::Data(format!(
                "inputs span a subspace of dimension {rank}, need exactly {}",
                n - 1
            )));
        }
        let col = |k: usize| -> Vec<f64> { eig.eigenvectors.column(k).iter().copied().collect() };
        let mut normal = col(order[0]);
        if normal[0].abs() < 1e-12 {
            return Err(Error::InvalidModel(
                "normal of the input span has zero first coordinate".into(),
            ));
        }
        if normal[0] < 0.0 {
            normal.iter_mut().for_each(|v| *v = -*v);
        }
        let basis = order[1..].iter().map(|&k| col(k)).collect();
        Ok(Self { normal, basis })
    }

    /// Point sum_i w_i e_i + c d.
    pub fn embed(&self, w: &[f64], offset: f64) -> Vec<f64> {
        let mut x: Vec<f64> = self.normal.iter().map(|d| offset * d).collect();
        for (wi, e) in w.iter().zip(&self.basis) {
            for (x, e) in x.iter_mut().zip(e) {
                *x += wi * e;
            }
        }
        x
    }

    /// Coordinates of x in the basis of H.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|e| dot(e, x)).collect()
    }
}

/// Checks that every direction v in H is penalised by at least one data point,
/// i.e. some j has (2 b_j - 1) <a_j, v> < 0. One-dimensional H is checked
/// exactly, higher dimensions on a discretised unit sphere.
pub fn check_posterior_finite(m: &LogisticModel, geo: &HyperplaneGeometry) -> Result<()> {
    let k = geo.basis.len();
    let proj: Vec<Vec<f64>> = (0..m.len())
        .map(|j| {
            let s = 2.0 * m.label(j) - 1.0;
            geo.project(m.input(j)).into_iter().map(|v| s * v).collect()
        })
        .collect();
    let penalised = |v: &[f64]| proj.iter().any(|c| dot(c, v) < -1e-12);
    let mut directions: Vec<Vec<f64>> = Vec::new();
    for i in 0..k {
        for s in [-1.0, 1.0] {
            let mut e = vec![0.0; k];
            e[i] = s;
            directions.push(e);
        }
    }
    if k > 1 {
        let mut st = RngSpec::new(0x5eed, 0).stream();
        for _ in 0..20_000 {
            let mut v: Vec<f64> = (0..k).map(|_| st.normal()).collect();
            let r = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= r);
            directions.push(v);
        }
    }
    match directions.iter().find(|v| !penalised(v)) {
        None => Ok(()),
        Some(v) => Err(Error::ImproperPosterior(format!(
            "the likelihood does not decay along direction {v:?} of the input span (data are separable)"
        ))),
    }
}

/// Draws from nu_H. One-dimensional H uses a tabulated inverse CDF, larger H a
/// Student-t rejection sampler around the mode.
#[derive(Debug, Clone)]
pub struct NuHSampler {
    projected: Vec<Vec<f64>>,
    mode: Vec<f64>,
    kind: NuHKind,
}

#[derive(Debug, Clone)]
enum NuHKind {
    Table { knots: Vec<f64>, dens: Vec<f64>, cdf: Vec<f64> },
    Student { chol: DMatrix<f64>, log_bound: f64 },
}

const STUDENT_DOF: f64 = 4.0;

impl NuHSampler {
    pub fn new(m: &LogisticModel) -> Result<Self> {
        let geo = m.geometry()?;
        check_posterior_finite(m, geo)?;
        let projected: Vec<Vec<f64>> = (0..m.len())
            .map(|j| {
                let s = 2.0 * m.label(j) - 1.0;
                geo.project(m.input(j)).into_iter().map(|v| s * v).collect()
            })
            .collect();
        let log_nu = |w: &[f64]| projected.iter().map(|c| log_sigmoid(dot(c, w))).sum::<f64>();
        let (mode, hess) = newton_mode(&projected)?;
        let k = mode.len();
        let peak = log_nu(&mode);
        let kind = if k == 1 {
            let curv = hess[(0, 0)].max(1e-12);
            let step = 1.0 / curv.sqrt();
            let edge = |dir: f64| {
                let mut r = step;
                while log_nu(&[mode[0] + dir * r]) > peak - 40.0 && r < 1e6 {
                    r *= 1.5;
                }
                mode[0] + dir * r
            };
            let (lo, hi) = (edge(-1.0), edge(1.0));
            let n = 8192;
            let knots: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
            let dens: Vec<f64> = knots.iter().map(|w| (log_nu(&[*w]) - peak).exp()).collect();
            let mut cdf = vec![0.0; n + 1];
            for i in 1..=n {
                cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (knots[i] - knots[i - 1]);
            }
            NuHKind::Table { knots, dens, cdf }
        } else {
            let cov = hess
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Sampler("singular Hessian at the mode".into()))?
                * 2.0;
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::Sampler("proposal covariance not positive definite".into()))?
                .l();
            let mut s = Self { projected: projected.clone(), mode: mode.clone(), kind: NuHKind::Student { chol: chol.clone(), log_bound: 0.0 } };
            let log_bound = s.probe_bound(peak)?;
            s.kind = NuHKind::Student { chol, log_bound };
            return Ok(s);
        };
        Ok(Self { projected, mode, kind })
    }

    pub fn mode(&self) -> &[f64] {
        &self.mode
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        self.projected.iter().map(|c| log_sigmoid(dot(c, w))).sum()
    }

    /// One draw of the H-coordinates.
    pub fn sample(&self, stream: &mut Stream) -> Result<Vec<f64>> {
        match &self.kind {
            NuHKind::Table { knots, dens, cdf } => {
                let total = *cdf.last().unwrap();
                let u = stream.uniform() * total;
                let i = cdf.partition_point(|c| *c < u).clamp(1, knots.len() - 1);
                let (x0, x1) = (knots[i - 1], knots[i]);
                let (f0, f1) = (dens[i - 1], dens[i]);
                let r = u - cdf[i - 1];
                let h = x1 - x0;
                // Invert the trapezoid CDF of the linear density on [x0, x1].
                let slope = (f1 - f0) / h;
                let t = if slope.abs() < 1e-14 * f0.max(1e-300) {
                    r / f0
                } else {
                    let disc = (f0 * f0 + 2.0 * slope * r).max(0.0);
                    2.0 * r / (f0 + disc.sqrt())
                };
                Ok(vec![(x0 + t).clamp(x0, x1)])
            }
            NuHKind::Student { chol, log_bound } => {
                for _ in 0..1_000_000 {
                    let (w, log_q) = self.student_draw(chol, stream);
                    if stream.uniform().ln() < self.log_density(&w) - log_q - log_bound {
                        return Ok(w);
                    }
                }
                Err(Error::Sampler("nu_H rejection acceptance below 1e-6".into()))
            }
        }
    }

    fn student_draw(&self, chol: &DMatrix<f64>, stream: &mut Stream) -> (Vec<f64>, f64) {
        let k = self.mode.len();
        let z = DVector::from_iterator(k, (0..k).map(|_| stream.normal()));
        let chi: f64 = (0..STUDENT_DOF as usize).map(|_| stream.normal().powi(2)).sum();
        let scale = (chi / STUDENT_DOF).sqrt();
        let dz = chol * &z / scale;
        let w: Vec<f64> = self.mode.iter().zip(dz.iter()).map(|(m, d)| m + d).collect();
        let maha = z.dot(&z) / (scale * scale);
        (w, self.student_log_q(maha))
    }

    fn student_log_q(&self, maha: f64) -> f64 {
        let k = self.mode.len() as f64;
        -0.5 * (STUDENT_DOF + k) * (1.0 + maha / STUDENT_DOF).ln()
    }

    /// Envelope constant: sup of log nu_H - log q, probed radially along the
    /// proposal axes and at random proposal draws, then padded.
    fn probe_bound(&self, peak: f64) -> Result<f64> {
        let NuHKind::Student { chol, .. } = &self.kind else {
            return Ok(0.0);
        };
        let k = self.mode.len();
        let mut best = peak - self.student_log_q(0.0);
        for axis in 0..k {
            for sign in [-1.0, 1.0] {
                let mut r = 0.25;
                while r < 200.0 {
                    let mut z = DVector::zeros(k);
                    z[axis] = sign * r;
                    let dz = chol * &z;
                    let w: Vec<f64> = self.mode.iter().zip(dz.iter()).map(|(m, d)| m + d).collect();
                    best = best.max(self.log_density(&w) - self.student_log_q(r * r));
                    r *= 1.25;
                }
            }
        }
        let mut st = RngSpec::new(0xb0b, 0).stream();
        for _ in 0..20_000 {
            let (w, lq) = self.student_draw(chol, &mut st);
            best = best.max(self.log_density(&w) - lq);
        }
        Ok(best + 0.5)
    }
}

/// Damped Newton for the mode of nu_H; returns the mode and the Hessian of -log nu_H there.
fn newton_mode(projected: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let k = projected[0].len();
    let f = |w: &DVector<f64>| -> f64 {
        -projected
            .iter()
            .map(|c| log_sigmoid(c.iter().zip(w.iter()).map(|(a, b)| a * b).sum()))
            .sum::<f64>()
    };
    let mut w = DVector::zeros(k);
    for _ in 0..200 {
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for c in projected {
            let cv = DVector::from_column_slice(c);
            let t = cv.dot(&w);
            let s = sigmoid(t);
            grad -= &cv * (1.0 - s);
            hess += &cv * cv.transpose() * (s * (1.0 - s));
        }
        let reg = hess.clone() + DMatrix::identity(k, k) * 1e-12;
        let step = reg
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::Sampler("singular Hessian in mode search".into()))?;
        let f0 = f(&w);
        let mut lambda = 1.0;
        let mut next = &w - &step * lambda;
        while f(&next) > f0 && lambda > 1e-10 {
            lambda *= 0.5;
            next = &w - &step * lambda;
        }
        let done = (&next - &w).norm() < 1e-12 * (1.0 + w.norm());
        w = next;
        if done {
            let mut hess = DMatrix::zeros(k, k);
            for c in projected {
                let cv = DVector::from_column_slice(c);
                let s = sigmoid(cv.dot(&w));
                hess += &cv * cv.transpose() * (s * (1.0 - s));
            }
            return Ok((w.iter().copied().collect(), hess));
        }
    }
    Err(Error::Sampler("Newton mode search did not converge".into()))
}

/// Reads rows `a_1, ..., a_n, b` (header optional) into a logistic model.
pub fn read_training_data<R: Read>(input: R) -> Result<LogisticModel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.parse::<f64>()).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Data(format!("row {i}: {e}"))),
        };
        if row.len() < 2 {
            return Err(Error::Data(format!("row {i} needs at least one input and a label")));
        }
        let (a, b) = row.split_at(row.len() - 1);
        inputs.push(a.to_vec());
        labels.push(b[0]);
    }
    let dim = inputs.first().map(|a| a.len()).unwrap_or(0);
    LogisticModel::new(dim, inputs, labels)
}

/// Loads a training file and checks that it defines a proper posterior on H.
pub fn ingest_training_data(path: &Path) -> Result<Arc<LogisticModel>> {
    let file = std::fs::File::open(path)?;
    let model = read_training_data(file)?;
    let geo = model.geometry()?;
    check_posterior_finite(&model, geo)?;
    Ok(Arc::new(model))
}

/// Bundled toy data: four points on the diagonal of R^2, not separable along it.
pub const TOY_LOGISTIC_2D_CSV: &str = "a_1,a_2,b
1.0,1.0,1
-1.0,-1.0,1
2.0,2.0,0
0.5,0.5,0
";

pub fn toy_logistic_2d() -> Arc<LogisticModel> {
    Arc::new(read_training_data(TOY_LOGISTIC_2D_CSV.as_bytes()).expect("bundled data parse"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }

    #[test]
    fn toy_geometry() {
        let m = toy_logistic_2d();
        let g = m.geometry().unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((g.normal[0] - s).abs() < 1e-12 && (g.normal[1] + s).abs() < 1e-12);
        for j in 0..m.len() {
            assert!(dot(m.input(j), &g.normal).abs() < 1e-12);
        }
        assert!(dot(&g.basis[0], &g.normal).abs() < 1e-12);
        check_posterior_finite(&m, g).unwrap();
    }

    #[test]
    fn full_rank_inputs_rejected() {
        let m = read_training_data("1,0,1\n0,1,0\n1,1,1\n".as_bytes()).unwrap();
        let e = m.geometry().unwrap_err();
        assert!(e.to_string().contains("span all"), "{e}");
    }

    #[test]
    fn bad_label_rejected() {
        let e = read_training_data("1,1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
    }

    #[test]
    fn separable_data_is_improper() {
        let m = read_training_data("1,1,1\n2,2,1\n-1,-1,0\n".as_bytes()).unwrap();
        let g = m.geometry().unwrap();
        assert!(matches!(check_posterior_finite(&m, g), Err(Error::ImproperPosterior(_))));
    }

    #[test]
    fn nu_constant_along_normal() {
        let m = toy_logistic_2d();
        let g = m.geometry().unwrap().clone();
        let mut s = RngSpec::new(1, 1).stream();
        for _ in 0..100 {
            let x = [s.normal(), s.normal()];
            let c = 5.0 * s.normal();
            let y = [x[0] + c * g.normal[0], x[1] + c * g.normal[1]];
            assert!((m.log_nu(&x) - m.log_nu(&y)).abs() < 1e-12);
            for j in 0..m.len() {
                assert!((dot(m.input(j), &x) - dot(m.input(j), &y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn table_sampler_matches_density_mean() {
        let m = toy_logistic_2d();
        let smp = m.nu_h_sampler().unwrap();
        let f = |w: f64| smp.log_density(&[w]).exp();
        let lo = smp.mode()[0] - 40.0;
        let hi = smp.mode()[0] + 40.0;
        let z = quadrature::double_exponential::integrate(f, lo, hi, 1e-12).integral;
        let mean = quadrature::double_exponential::integrate(|w| w * f(w), lo, hi, 1e-12).integral / z;
        let second = quadrature::double_exponential::integrate(|w| w * w * f(w), lo, hi, 1e-12).integral / z;
        let sd = (second - mean * mean).sqrt();
        let mut st = RngSpec::new(2, 0).stream();
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| smp.sample(&mut st).unwrap()[0]).collect();
        let emp = draws.iter().sum::<f64>() / n as f64;
        assert!((emp - mean).abs() < 4.0 * sd / (n as f64).sqrt(), "{emp} vs {mean}");
    }

    #[test]
    fn student_sampler_in_three_dimensions() {
        // inputs span the plane x3 = x1 (normal along (1, 0, -1)).
        let csv = "1,0,1,1\n1,0,1,0\n0,1,0,1\n0,-1,0,1\n0,1,0,0\n-1,0,-1,1\n2,1,2,0\n";
        let m = read_training_data(csv.as_bytes()).unwrap();
        let smp = NuHSampler::new(&m).unwrap();
        let mut st = RngSpec::new(4, 0).stream();
        let n = 4000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let w = smp.sample(&mut st).unwrap();
            mean[0] += w[0] / n as f64;
            mean[1] += w[1] / n as f64;
        }
        // crude importance estimate of the mean on a grid
        let (mut z, mut m0, mut m1) = (0.0, 0.0, 0.0);
        let h = 0.05;
        for i in -400..400 {
            for j in -400..400 {
                let w = [i as f64 * h, j as f64 * h];
                let p = smp.log_density(&w).exp();
                z += p;
                m0 += p * w[0];
                m1 += p * w[1];
            }
        }
        assert!((mean[0] - m0 / z).abs() < 0.1, "{mean:?} vs {} {}", m0 / z, m1 / z);
        assert!((mean[1] - m1 / z).abs() < 0.1, "{mean:?} vs {} {}", m0 / z, m1 / z);
    }
}
