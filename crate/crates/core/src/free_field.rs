//! The truncated Euclidean free field in eigenbasis coordinates.
//!
//! Coordinates are `X_i = <φ, φ_i>`, so a sample is the coefficient vector
//! of the field `Σ X_i φ_i` on the grid and its covariance is
//! `C_ij = (φ_i, (-Δ + m²)^{-1} φ_j)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{config, Error, Result};
use crate::rng::{self, BATCH};
use crate::spectral::{fourier_multiplier_matrix, symmetrize, CoordinateVector, EigenSystem};
use crate::stats::{mean_stderr, pairwise_sum, ratio_estimate, Estimate};

/// Free-field covariance in the coordinates of an eigensystem.
#[derive(Debug, Clone)]
pub struct FreeFieldModel {
    pub es: Arc<EigenSystem>,
    pub mass: f64,
    pub cov: DMatrix<f64>,
    /// Symmetric square root of `cov` (negative round-off eigenvalues clipped).
    pub root: DMatrix<f64>,
}

/// `ϕ = Σ c_i φ_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestFunction {
    pub coefficients: Vec<f64>,
}

impl TestFunction {
    pub fn new(coefficients: Vec<f64>) -> Self {
        Self { coefficients }
    }

    pub fn zero(k: usize) -> Self {
        Self { coefficients: vec![0.0; k] }
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self::new(self.coefficients.iter().map(|c| c * t).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.coefficients.iter().zip(&other.coefficients).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scaled(-1.0))
    }

    /// `<X, ϕ> = Σ X_i c_i`.
    pub fn pair(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

pub fn build_covariance(es: Arc<EigenSystem>, mass: f64) -> Result<FreeFieldModel> {
    if !(mass > 0.0) {
        return config(format!("mass must be positive, got {mass}"));
    }
    let grid = es
        .grid
        .ok_or_else(|| Error::Config("eigensystem carries no grid".into()))?;
    let m2 = mass * mass;
    let green = fourier_multiplier_matrix(&grid, |k2| 1.0 / (k2 + m2));
    let mut cov = es.basis.transpose() * (green * &es.basis) * grid.cell_volume();
    symmetrize(&mut cov);
    let root = psd_root(&cov)?;
    Ok(FreeFieldModel { es, mass, cov, root })
}

pub fn psd_root(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if let Some(bad) = eig.eigenvalues.iter().find(|v| **v < -1e-10 * max.max(1.0)) {
        return Err(Error::Numeric(format!("covariance has eigenvalue {bad:e}")));
    }
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose())
}

impl FreeFieldModel {
    pub fn from_covariance(es: Arc<EigenSystem>, mass: f64, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != es.count() || cov.ncols() != es.count() {
            return Err(Error::DimensionMismatch("covariance size differs from mode count".into()));
        }
        let root = psd_root(&cov)?;
        Ok(Self { es, mass, cov, root })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    /// `cᵀ C c`.
    pub fn variance_of(&self, phi: &TestFunction) -> f64 {
        let c = DVector::from_column_slice(&phi.coefficients);
        (c.transpose() * &self.cov * &c)[(0, 0)]
    }

    /// Weights `λ_i⁴` of the state space the samples live in.
    pub fn state_weights(&self) -> Vec<f64> {
        self.es.lambda.iter().map(|l| l.powi(4)).collect()
    }
}

/// `count` samples stored row-major, `dim` coordinates each.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSamples {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FieldSamples {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        Self { dim, data: rows.iter().flatten().copied().collect() }
    }
}

/// Draw `count` i.i.d. samples of the truncated free field. Output depends
/// only on `(seed, count)`, not on the number of worker threads.
pub fn sample_matrix(model: &FreeFieldModel, count: usize, seed: u64) -> FieldSamples {
    sample_gaussian(&model.root, count, seed)
}

/// Centered Gaussian samples `root · z` with `z` standard normal; batch `b`
/// of `BATCH` rows draws from stream `b`.
pub fn sample_gaussian(root: &DMatrix<f64>, count: usize, seed: u64) -> FieldSamples {
    let k = root.nrows();
    let mut data = vec![0.0; count * k];
    data.par_chunks_mut(BATCH * k.max(1))
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = rng::stream(seed, b as u64);
            let mut z = DVector::zeros(k);
            for row in chunk.chunks_exact_mut(k.max(1)) {
                z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                row.copy_from_slice((root * &z).as_slice());
            }
        });
    FieldSamples { dim: k, data }
}

pub fn sample_field(model: &FreeFieldModel, count: usize, seed: u64) -> Result<Vec<CoordinateVector>> {
    if count == 0 {
        return config("sample count must be at least 1");
    }
    let w = model.state_weights();
    let s = sample_matrix(model, count, seed);
    s.rows().map(|r| CoordinateVector::new(r.to_vec(), w.clone())).collect()
}

/// `|||ϕ||| = (ϕ, (-Δ+1)^{-1} ϕ)^{1/2}` at truncation (unit mass).
pub fn triple_norm(model: &FreeFieldModel, phi: &TestFunction) -> Result<f64> {
    if model.mass == 1.0 {
        Ok(model.variance_of(phi).max(0.0).sqrt())
    } else {
        let unit = build_covariance(model.es.clone(), 1.0)?;
        Ok(unit.variance_of(phi).max(0.0).sqrt())
    }
}

/// `phi` rescaled to `|||ϕ||| = r`.
pub fn with_triple_norm(model: &FreeFieldModel, phi: &TestFunction, r: f64) -> Result<TestFunction> {
    let n = triple_norm(model, phi)?;
    if !(n > 0.0) {
        return config("test function has zero norm");
    }
    Ok(phi.scaled(r / n))
}

/// Gaussian directions rescaled so that `|||ϕ|||` is uniform on
/// `[r_lo, r_hi]`.
pub fn random_test_functions(model: &FreeFieldModel, count: usize, r_lo: f64, r_hi: f64, seed: u64) -> Result<Vec<TestFunction>> {
    if !(0.0 < r_lo && r_lo <= r_hi) {
        return config("need 0 < r_lo <= r_hi");
    }
    let mut rng = rng::stream(seed, 0);
    (0..count)
        .map(|_| {
            let dir = TestFunction::new((0..model.dim()).map(|_| StandardNormal.sample(&mut rng)).collect());
            let r = r_lo + (r_hi - r_lo) * rng.random::<f64>();
            with_triple_norm(model, &dir, r)
        })
        .collect()
}

/// Monte-Carlo estimate of a complex expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComplexEstimate {
    pub re: f64,
    pub im: f64,
    pub stderr_re: f64,
    pub stderr_im: f64,
}

impl ComplexEstimate {
    pub fn exact(z: Complex64) -> Self {
        Self { re: z.re, im: z.im, stderr_re: 0.0, stderr_im: 0.0 }
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }

    /// Standard error of the modulus of the estimation error.
    pub fn stderr(&self) -> f64 {
        self.stderr_re.hypot(self.stderr_im)
    }
}

/// Empirical characteristic functional over a fixed sample set, optionally
/// importance-weighted.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalFunctional<'a> {
    pub samples: &'a FieldSamples,
    pub weights: Option<&'a [f64]>,
}

impl<'a> EmpiricalFunctional<'a> {
    pub fn new(samples: &'a FieldSamples) -> Self {
        Self { samples, weights: None }
    }

    pub fn weighted(samples: &'a FieldSamples, weights: &'a [f64]) -> Self {
        Self { samples, weights: Some(weights) }
    }

    fn phases(&self, phi: &TestFunction) -> (Vec<f64>, Vec<f64>) {
        self.samples
            .rows()
            .map(|x| {
                let (s, c) = phi.pair(x).sin_cos();
                (c, s)
            })
            .unzip()
    }

    fn mean_of(&self, values: &[f64]) -> Estimate {
        match self.weights {
            Some(w) => ratio_estimate(w, values),
            None => mean_stderr(values),
        }
    }

    pub fn estimate(&self, phi: &TestFunction) -> ComplexEstimate {
        let (c, s) = self.phases(phi);
        let re = self.mean_of(&c);
        let im = self.mean_of(&s);
        ComplexEstimate { re: re.value, im: im.value, stderr_re: re.stderr, stderr_im: im.stderr }
    }

    /// Estimate of `E[e^{i<X,a>} - e^{i<X,b>}]` with common random numbers.
    pub fn difference(&self, a: &TestFunction, b: &TestFunction) -> ComplexEstimate {
        let (ca, sa) = self.phases(a);
        let (cb, sb) = self.phases(b);
        let dc: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x - y).collect();
        let ds: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| x - y).collect();
        let re = self.mean_of(&dc);
        let im = self.mean_of(&ds);
        ComplexEstimate { re: re.value, im: im.value, stderr_re: re.stderr, stderr_im: im.stderr }
    }

    /// Plain sample moment `E[f(<X,ϕ>)]` under the (weighted) sample measure.
    pub fn moment(&self, phi: &TestFunction, f: impl Fn(f64) -> f64) -> Estimate {
        let v: Vec<f64> = self.samples.rows().map(|x| f(phi.pair(x))).collect();
        self.mean_of(&v)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum CharMode<'a> {
    Exact,
    MonteCarlo(&'a FieldSamples),
}

pub fn char_functional(model: &FreeFieldModel, phi: &TestFunction, mode: CharMode<'_>) -> ComplexEstimate {
    match mode {
        CharMode::Exact => ComplexEstimate::exact(Complex64::new((-0.5 * model.variance_of(phi)).exp(), 0.0)),
        CharMode::MonteCarlo(s) => EmpiricalFunctional::new(s).estimate(phi),
    }
}

pub fn double_factorial(n: i64) -> f64 {
    if n <= 0 {
        1.0
    } else {
        (1..=n).rev().step_by(2).map(|k| k as f64).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentCheck {
    pub l: u32,
    pub exact: f64,
    pub empirical: Estimate,
}

impl MomentCheck {
    pub fn passes(&self, sigmas: f64) -> bool {
        self.empirical.within(self.exact, sigmas)
    }
}

/// `E[<X,ϕ>^{2l}] = (2l-1)!! σ^{2l}` with `σ² = cᵀ C c`.
pub fn gaussian_moment_check(
    model: &FreeFieldModel,
    phi: &TestFunction,
    l: u32,
    samples: &FieldSamples,
) -> Result<MomentCheck> {
    if 2 * l > 12 {
        return config(format!("moment order 2l = {} exceeds 12", 2 * l));
    }
    let var = model.variance_of(phi);
    let exact = double_factorial(2 * l as i64 - 1) * var.powi(l as i32);
    let empirical = if l == 0 {
        Estimate::exact(1.0)
    } else {
        EmpiricalFunctional::new(samples).moment(phi, |p| p.powi(2 * l as i32))
    };
    Ok(MomentCheck { l, exact, empirical })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinlosCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// `|C(ψ+ϕ) - C(ψ)|² ≤ 2 |C(ϕ) - 1|` evaluated with the exact free-field
/// functional.
pub fn minlos_increment_exact(model: &FreeFieldModel, phi: &TestFunction, psi: &TestFunction) -> MinlosCheck {
    let c = |t: &TestFunction| (-0.5 * model.variance_of(t)).exp();
    let lhs = (c(&psi.add(phi)) - c(psi)).powi(2);
    let rhs = 2.0 * (c(phi) - 1.0).abs();
    MinlosCheck { lhs, rhs, stderr: 0.0, pass: lhs <= rhs + 1e-14 }
}

/// Same inequality with all three values estimated on one sample set.
pub fn minlos_increment_check(
    functional: &EmpiricalFunctional<'_>,
    phi: &TestFunction,
    psi: &TestFunction,
) -> MinlosCheck {
    let d = functional.difference(&psi.add(phi), psi);
    let lhs = d.value().norm_sqr();
    let se_lhs = 2.0 * d.value().norm() * d.stderr() + d.stderr().powi(2);
    let k = phi.coefficients.len();
    let e = functional.difference(phi, &TestFunction::zero(k));
    let rhs = 2.0 * e.value().norm();
    let se_rhs = 2.0 * e.stderr();
    let stderr = se_lhs.hypot(se_rhs);
    MinlosCheck { lhs, rhs, stderr, pass: lhs <= rhs + 5.0 * stderr }
}

/// Smallest eigenvalue of the Hermitian matrix `[Ĉ(ϕ_i - ϕ_j)]`, via its
/// real symmetric embedding.
pub fn bochner_min_eigenvalue(functional: &EmpiricalFunctional<'_>, phis: &[TestFunction]) -> f64 {
    let k = phis.len();
    let mut m = DMatrix::zeros(2 * k, 2 * k);
    for i in 0..k {
        for j in 0..k {
            let c = functional.estimate(&phis[i].sub(&phis[j]));
            m[(i, j)] = c.re;
            m[(i + k, j + k)] = c.re;
            m[(i, j + k)] = -c.im;
            m[(i + k, j)] = c.im;
        }
    }
    symmetrize(&mut m);
    SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Empirical covariance matrix of a sample set.
pub fn empirical_covariance(samples: &FieldSamples) -> DMatrix<f64> {
    let k = samples.dim;
    let n = samples.len() as f64;
    let mut out = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let prods: Vec<f64> = samples.rows().map(|x| x[i] * x[j]).collect();
            let v = pairwise_sum(&prods) / n;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// CSV with one row per sample; header carries seed, K and mass.
pub fn samples_csv(samples: &FieldSamples, seed: u64, mass: f64) -> String {
    let mut out = format!("# seed={seed} K={} m0={mass}\n", samples.dim);
    let cols: Vec<String> = (1..=samples.dim).map(|i| format!("x{i}")).collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for row in samples.rows() {
        let r: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Characteristic functional along the ray `t ϕ`: `t,re,im,stderr`.
pub fn char_scan_csv(functional: &EmpiricalFunctional<'_>, phi: &TestFunction, ts: &[f64]) -> String {
    let mut out = String::from("t,re,im,stderr\n");
    for &t in ts {
        let c = functional.estimate(&phi.scaled(t));
        out.push_str(&format!("{t},{:.17e},{:.17e},{:.17e}\n", c.re, c.im, c.stderr()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{GridSpec, OperatorSpec};

    fn model(k: usize) -> FreeFieldModel {
        let g = GridSpec::new(1, 10.0, 64).unwrap();
        let es = EigenSystem::compute(&g, &OperatorSpec::h(1), k).unwrap();
        build_covariance(Arc::new(es), 1.0).unwrap()
    }

    #[test]
    fn rejects_nonpositive_mass() {
        let m = model(4);
        assert!(build_covariance(m.es.clone(), 0.0).is_err());
        assert!(build_covariance(m.es.clone(), -1.0).is_err());
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let m = model(16);
        assert!((&m.cov - m.cov.transpose()).abs().max() < 1e-12);
        let eig = SymmetricEigen::new(m.cov.clone());
        assert!(eig.eigenvalues.iter().all(|v| *v > -1e-10));
        let rr = &m.root * &m.root;
        assert!((rr - &m.cov).abs().max() < 1e-10);
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = model(8);
        let a = sample_matrix(&m, 1, 99);
        let b = sample_matrix(&m, 1, 99);
        assert_eq!(a, b);
        let c = sample_matrix(&m, 1, 100);
        assert_ne!(a, c);
        assert!(sample_field(&m, 0, 1).is_err());
    }

    #[test]
    fn zero_test_function() {
        let m = model(8);
        let z = TestFunction::zero(8);
        assert_eq!(triple_norm(&m, &z).unwrap(), 0.0);
        assert_eq!(char_functional(&m, &z, CharMode::Exact).value(), Complex64::new(1.0, 0.0));
        let s = sample_matrix(&m, 100, 1);
        let c = char_functional(&m, &z, CharMode::MonteCarlo(&s));
        assert_eq!(c.value(), Complex64::new(1.0, 0.0));
        let mc = minlos_increment_check(&EmpiricalFunctional::new(&s), &z, &z);
        assert_eq!((mc.lhs, mc.rhs), (0.0, 0.0));
        assert!(mc.pass);
    }

    #[test]
    fn double_factorials() {
        assert_eq!(double_factorial(-1), 1.0);
        assert_eq!(double_factorial(1), 1.0);
        assert_eq!(double_factorial(5), 15.0);
        assert_eq!(double_factorial(6), 48.0);
    }

    #[test]
    fn moment_order_limits() {
        let m = model(4);
        let s = sample_matrix(&m, 10, 1);
        let phi = TestFunction::new(vec![1.0, 0.0, 0.0, 0.0]);
        let c0 = gaussian_moment_check(&m, &phi, 0, &s).unwrap();
        assert_eq!(c0.exact, 1.0);
        let c1 = gaussian_moment_check(&m, &phi, 1, &s).unwrap();
        assert!((c1.exact - triple_norm(&m, &phi).unwrap().powi(2)).abs() < 1e-14);
        assert!(gaussian_moment_check(&m, &phi, 7, &s).is_err());
    }

    #[test]
    fn conjugate_symmetry_of_estimator() {
        let m = model(6);
        let s = sample_matrix(&m, 500, 3);
        let phi = TestFunction::new(vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.7]);
        let f = EmpiricalFunctional::new(&s);
        let a = f.estimate(&phi);
        let b = f.estimate(&phi.scaled(-1.0));
        assert_eq!(a.re, b.re);
        assert_eq!(a.im, -b.im);
        assert!(a.value().norm() <= 1.0);
    }

    #[test]
    fn exact_functional_decreases_along_rays() {
        let m = model(6);
        let phi = TestFunction::new(vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.7]);
        let vals: Vec<f64> = (0..20)
            .map(|t| char_functional(&m, &phi.scaled(t as f64 * 0.25), CharMode::Exact).re)
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }
}
