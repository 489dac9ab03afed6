#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use nlsq_core::free_field::{build_covariance, FreeFieldModel};
use nlsq_core::spectral::{EigenSystem, GridSpec, OperatorSpec};

pub fn free_model(d: usize, l: f64, n: usize, k: usize, mass: f64) -> Arc<FreeFieldModel> {
    let grid = GridSpec::new(d, l, n).unwrap();
    let mut spec = OperatorSpec::h(d);
    spec.mass = mass;
    let es = Arc::new(EigenSystem::compute(&grid, &spec, k).unwrap());
    Arc::new(build_covariance(es, mass).unwrap())
}

/// `(-Δ + m²)^{-1} f` on a one-dimensional periodic grid through the FFT.
pub fn green_apply_1d(grid: &GridSpec, f: &[f64], mass: f64) -> Vec<f64> {
    let n = grid.points_per_axis;
    let mut planner = FftPlanner::new();
    let mut v: Vec<Complex64> = f.iter().map(|x| Complex64::new(*x, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut v);
    for (k, c) in v.iter_mut().enumerate() {
        let m = if k < n / 2 { k as f64 } else { k as f64 - n as f64 };
        let xi = std::f64::consts::PI * m / grid.half_width;
        *c /= xi * xi + mass * mass;
    }
    planner.plan_fft_inverse(n).process(&mut v);
    v.iter().map(|c| c.re / n as f64).collect()
}

/// Grid values of `Σ c_i φ_i`.
pub fn synthesize(model: &FreeFieldModel, c: &[f64]) -> Vec<f64> {
    model.es.synthesize(c)
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
pub fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        let diag: f64 = (0..n).map(|i| a[(i, i)].powi(2)).sum();
        if off <= 1e-30 * diag {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// `∫∫ φ(x) φ(y) (u(y) - u(x))² |y - x|^{-1-α} dy dx` for the standard
/// normal density, by nested composite Simpson rules. The inner variable is
/// `y = x ± s²`, which removes the singularity at `s = 0`.
pub fn quadrature_form(u: impl Fn(f64) -> f64, alpha: f64) -> f64 {
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            s += f(a + h * k as f64) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let inner = |x: f64| {
        let ux = u(x);
        let f = |s: f64| {
            if s == 0.0 {
                return 0.0;
            }
            let t = s * s;
            let w = 2.0 * s / t.powf(1.0 + alpha);
            w * ((u(x + t) - ux).powi(2) * pdf(x + t) + (u(x - t) - ux).powi(2) * pdf(x - t))
        };
        simpson(&f, 0.0, 5.0, 4000)
    };
    simpson(&|x| pdf(x) * inner(x), -9.0, 9.0, 600)
}
