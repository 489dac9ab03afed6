//! Finite particle configurations, Ruelle-type density sets `U_N`, and the
//! embedding of configurations into the coordinates of the modified
//! operator `H̃`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::quadrature::{adaptive, GaussLegendre};
use crate::rng;
use crate::spectral::{EigenSystem, GridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub y: Vec<f64>,
    pub m: u64,
}

/// `z = Σ m_j δ_{y_j}` restricted to the window `[-W, W]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub dim: usize,
    pub window: f64,
    pub points: Vec<Particle>,
}

impl Configuration {
    pub fn new(dim: usize, window: f64, points: Vec<Particle>) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return config(format!("dimension must be 1 or 2, got {dim}"));
        }
        if !(window > 0.0) {
            return config("window half-width must be positive");
        }
        for p in &points {
            if p.y.len() != dim {
                return Err(Error::DimensionMismatch(format!("point {:?} in dimension {dim}", p.y)));
            }
            if p.m == 0 {
                return config("multiplicities must be at least 1");
            }
            if p.y.iter().any(|c| !(c.abs() <= window)) {
                return config(format!("point {:?} outside the window ±{window}", p.y));
            }
        }
        Ok(Self { dim, window, points })
    }

    pub fn empty(dim: usize, window: f64) -> Self {
        Self { dim, window, points: Vec::new() }
    }

    pub fn total_multiplicity(&self) -> u64 {
        self.points.iter().map(|p| p.m).sum()
    }

    /// Disjoint union (multiplicities add at coinciding points).
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch("configurations differ in dimension".into()));
        }
        let mut points = self.points.clone();
        points.extend(other.points.iter().cloned());
        Self::new(self.dim, self.window.max(other.window), points)
    }

    pub fn scaled(&self, c: u64) -> Result<Self> {
        Self::new(self.dim, self.window, self.points.iter().map(|p| Particle { y: p.y.clone(), m: p.m * c }).collect())
    }
}

/// Lattice index of the half-open unit cube `Q_r` containing `y`.
pub fn cube_of(y: &[f64]) -> Vec<i64> {
    y.iter().map(|c| (c + 0.5).floor() as i64).collect()
}

pub fn sup_norm(r: &[i64]) -> u64 {
    r.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
}

/// `n(Y, r)`: total multiplicity in `Q_r`.
pub fn occupation_count(conf: &Configuration, r: &[i64]) -> u64 {
    conf.points.iter().filter(|p| cube_of(&p.y) == r).map(|p| p.m).sum()
}

pub fn occupation_map(conf: &Configuration) -> BTreeMap<Vec<i64>, u64> {
    let mut counts = BTreeMap::new();
    for p in &conf.points {
        *counts.entry(cube_of(&p.y)).or_insert(0) += p.m;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Membership {
    pub member: bool,
    pub worst_l: u64,
    /// `max_l Σ_{|r|≤l} n² / (N² (2l+1)^d)`.
    pub worst_ratio: f64,
}

/// Check `Σ_{|r| ≤ l} n(Y, r)² ≤ N² (2l+1)^d` for `l = 0..=l_max`.
pub fn u_n_membership(conf: &Configuration, n: u64, l_max: u64) -> Result<Membership> {
    if n == 0 {
        return config("N must be at least 1");
    }
    let counts = occupation_map(conf);
    if let Some(far) = counts.keys().map(|r| sup_norm(r)).max() {
        if far > l_max {
            return config(format!("l_max = {l_max} does not cover occupied cube at distance {far}"));
        }
    }
    let mut by_shell = vec![0u128; l_max as usize + 1];
    for (r, c) in &counts {
        by_shell[sup_norm(r) as usize] += (*c as u128) * (*c as u128);
    }
    let n2 = (n as u128) * (n as u128);
    let mut lhs = 0u128;
    let mut out = Membership { member: true, worst_l: 0, worst_ratio: 0.0 };
    for (l, s) in by_shell.iter().enumerate() {
        lhs += s;
        let rhs = n2 * (2 * l as u128 + 1).pow(conf.dim as u32);
        let ratio = lhs as f64 / rhs as f64;
        if ratio > out.worst_ratio {
            out.worst_ratio = ratio;
            out.worst_l = l as u64;
        }
        if lhs > rhs {
            out.member = false;
        }
    }
    Ok(out)
}

/// Smallest `l_max` covering every occupied cube.
pub fn covering_l_max(conf: &Configuration) -> u64 {
    conf.points.iter().map(|p| sup_norm(&cube_of(&p.y))).max().unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuelleParams {
    pub gamma: f64,
    pub delta: f64,
}

/// `Σ_{l≥0} q^{l+1} = q / (1 - q)` with `q = exp(-(γ N² - e^δ))`.
pub fn ruelle_tail_bound(params: RuelleParams, n: u64) -> Result<f64> {
    let exponent = params.gamma * (n as f64).powi(2) - params.delta.exp();
    if !(exponent > 0.0) {
        return Err(Error::Divergent(format!(
            "γN² > e^δ fails: γN² - e^δ = {exponent:e} at N = {n}"
        )));
    }
    Ok(geometric_tail((-exponent).exp()))
}

/// `Σ_{l≥0} q^{l+1} = q / (1 - q)` for `0 ≤ q < 1`.
pub fn geometric_tail(q: f64) -> f64 {
    q / (1.0 - q)
}

/// `q = exp(-(γ N² - e^δ))`.
pub fn ruelle_ratio(params: RuelleParams, n: u64) -> f64 {
    (-(params.gamma * (n as f64).powi(2) - params.delta.exp())).exp()
}

/// Homogeneous Poisson configuration of intensity `rho` on `[-W, W]^d`
/// with unit multiplicities.
pub fn sample_poisson_config(dim: usize, intensity: f64, window: f64, seed: u64, stream_id: u64) -> Result<Configuration> {
    if !(intensity > 0.0 && window > 0.0) {
        return config("intensity and window must be positive");
    }
    let mut rng = rng::stream(seed, stream_id);
    let mean = intensity * (2.0 * window).powi(dim as i32);
    let count = Poisson::new(mean).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng) as usize;
    let points = (0..count)
        .map(|_| Particle {
            y: (0..dim).map(|_| rng.random_range(-window..window)).collect(),
            m: 1,
        })
        .collect();
    Configuration::new(dim, window, points)
}

/// Cubic Lagrange weights for offset `s ∈ [0, 1)` on nodes `-1, 0, 1, 2`.
fn cubic_weights(s: f64) -> [f64; 4] {
    [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ]
}

fn axis_stencil(grid: &GridSpec, y: f64) -> ([usize; 4], [f64; 4]) {
    let n = grid.points_per_axis as i64;
    let t = (y + grid.half_width) / grid.spacing();
    let j = t.floor();
    let w = cubic_weights(t - j);
    let j = j as i64;
    let idx = [-1, 0, 1, 2].map(|o| (j + o).rem_euclid(n) as usize);
    (idx, w)
}

/// Values `φ̃_i(y)` of the first `k` modes, interpolated by periodic cubic
/// Lagrange interpolation (tensor product in two dimensions).
pub fn eval_modes(es: &EigenSystem, y: &[f64], k: usize) -> Result<Vec<f64>> {
    let grid = es.grid.ok_or_else(|| Error::Config("eigensystem carries no grid".into()))?;
    if y.len() != grid.dim {
        return Err(Error::DimensionMismatch(format!("point {y:?} in a {}-dimensional grid", grid.dim)));
    }
    if y.iter().any(|c| !(c.abs() <= grid.half_width)) {
        return Err(Error::Domain(format!("point {y:?} outside the grid domain ±{}", grid.half_width)));
    }
    let k = k.min(es.count());
    let n = grid.points_per_axis;
    let mut out = vec![0.0; k];
    let mut add = |row: usize, w: f64| {
        for (i, o) in out.iter_mut().enumerate() {
            *o += w * es.basis[(row, i)];
        }
    };
    let (ix, wx) = axis_stencil(&grid, y[0]);
    if grid.dim == 1 {
        for a in 0..4 {
            add(ix[a], wx[a]);
        }
    } else {
        let (iy, wy) = axis_stencil(&grid, y[1]);
        for a in 0..4 {
            for b in 0..4 {
                add(ix[a] * n + iy[b], wx[a] * wy[b]);
            }
        }
    }
    Ok(out)
}

/// Coordinates `<z, φ̃_i> = Σ_j m_j φ̃_i(y_j)`, `i < k`.
pub fn embed(conf: &Configuration, es: &EigenSystem, k: usize) -> Result<Vec<f64>> {
    let k = k.min(es.count());
    let mut z = vec![0.0; k];
    for p in &conf.points {
        let v = eval_modes(es, &p.y, k)?;
        for (zi, vi) in z.iter_mut().zip(v) {
            *zi += p.m as f64 * vi;
        }
    }
    Ok(z)
}

/// `(Σ λ̃_i² z_i²)^{1/2}`, the truncated `H̃_{-1}` norm; it is also
/// `max_ϕ |<z, ϕ>| / ‖ϕ‖_{H̃_1}` over the span of the kept modes.
pub fn dual_norm(z: &[f64], lambda: &[f64]) -> f64 {
    z.iter().zip(lambda).map(|(a, l)| (l * a).powi(2)).sum::<f64>().sqrt()
}

/// `‖ϕ‖_{H̃_1} = (Σ c_i² / λ̃_i²)^{1/2}`.
pub fn h1_norm(c: &[f64], lambda: &[f64]) -> f64 {
    c.iter().zip(lambda).map(|(a, l)| (a / l).powi(2)).sum::<f64>().sqrt()
}

/// `Σ_{l≥1} (l+1)^{-d/2-5/2}`, i.e. `ζ(d/2 + 5/2) - 1`.
pub fn shell_series(dim: usize) -> f64 {
    let s = 0.5 * dim as f64 + 2.5;
    let terms = 10_000;
    let head: f64 = (2..=terms + 1).map(|j| (j as f64).powf(-s)).sum();
    // Euler-Maclaurin tail from terms + 2 on
    let a = (terms + 2) as f64;
    head + a.powf(1.0 - s) / (s - 1.0) + 0.5 * a.powf(-s)
}

/// Saturated reference configuration: multiplicity `n` in every cube of
/// `[-W, W]^d`, placed at the point of the cube nearest the origin.
pub fn saturated_reference(dim: usize, window: f64, n: u64) -> Result<Configuration> {
    let reach = (window - 0.5).floor().max(0.0) as i64;
    let nearest = |r: i64| -> f64 {
        match r.cmp(&0) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => r as f64 - 0.5,
            // upper faces are open
            std::cmp::Ordering::Less => r as f64 + 0.5 - 1e-9,
        }
    };
    let mut points = Vec::new();
    if dim == 1 {
        for r in -reach..=reach {
            points.push(Particle { y: vec![nearest(r)], m: n });
        }
    } else {
        for r in -reach..=reach {
            for s in -reach..=reach {
                points.push(Particle { y: vec![nearest(r), nearest(s)], m: n });
            }
        }
    }
    Configuration::new(dim, window, points)
}

/// `C₃(N) = κ N² (Σ_{l≥1} (l+1)^{-d/2-5/2} + 1)` with `κ` fixed by the
/// unit-multiplicity saturated reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct C3Calibration {
    pub kappa: f64,
    pub dim: usize,
    pub k_modes: usize,
}

impl C3Calibration {
    pub fn calibrate(es: &EigenSystem, window: f64, k: usize) -> Result<Self> {
        let grid = es.grid.ok_or_else(|| Error::Config("eigensystem carries no grid".into()))?;
        let reference = saturated_reference(grid.dim, window, 1)?;
        let k = k.min(es.count());
        let z = embed(&reference, es, k)?;
        let kappa = dual_norm(&z, &es.lambda[..k]) / (shell_series(grid.dim) + 1.0);
        Ok(Self { kappa, dim: grid.dim, k_modes: k })
    }

    pub fn c3(&self, n: u64) -> f64 {
        self.kappa * (n as f64).powi(2) * (shell_series(self.dim) + 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma21Report {
    /// Largest `|<z, ϕ>| / ‖ϕ‖_{H̃_1}` over the supplied test functions.
    pub max_ratio: f64,
    /// Supremum of that ratio over the kept span.
    pub dual_norm: f64,
    pub c3: f64,
    pub pass: bool,
}

/// Ratios `|<z, ϕ>| / ‖ϕ‖_{H̃_1}` for a panel of coefficient vectors,
/// compared against the calibrated `C₃(N)`.
pub fn lemma21_bound_check(
    conf: &Configuration,
    n: u64,
    es: &EigenSystem,
    calibration: &C3Calibration,
    test_functions: &[Vec<f64>],
) -> Result<Lemma21Report> {
    let m = u_n_membership(conf, n, covering_l_max(conf))?;
    if !m.member {
        return config(format!("configuration is not in U_{n} (worst ratio {} at l = {})", m.worst_ratio, m.worst_l));
    }
    let k = calibration.k_modes;
    let lambda = &es.lambda[..k];
    let z = embed(conf, es, k)?;
    let mut max_ratio: f64 = 0.0;
    for c in test_functions {
        if c.len() > k {
            return Err(Error::DimensionMismatch("test function has more coefficients than kept modes".into()));
        }
        let norm = h1_norm(c, lambda);
        if norm > 0.0 {
            let pair: f64 = c.iter().zip(&z).map(|(a, b)| a * b).sum();
            max_ratio = max_ratio.max(pair.abs() / norm);
        }
    }
    let dn = dual_norm(&z, lambda);
    let c3 = calibration.c3(n);
    Ok(Lemma21Report { max_ratio, dual_norm: dn, c3, pass: max_ratio <= c3 && dn <= c3 })
}

/// `∫_{Q_r} (|y|² + 1)^{-2(d+1)} dy`.
pub fn cell_weight(r: &[i64]) -> f64 {
    let d = r.len();
    let p = -2.0 * (d as f64 + 1.0);
    match d {
        1 => {
            let c = r[0] as f64;
            adaptive(|y| (y * y + 1.0).powf(p), c - 0.5, c + 0.5, 0.0, 1e-12).value
        }
        _ => {
            let gl = GaussLegendre::new(24);
            let (a, b) = (r[0] as f64, r[1] as f64);
            gl.composite(a - 0.5, a + 0.5, 4, |x| gl.composite(b - 0.5, b + 0.5, 4, |y| (x * x + y * y + 1.0).powf(p)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellDecayReport {
    pub dim: usize,
    /// `(l, max_{|r|=l} ∫_{Q_r} w² / (l²+1)^{-(3d+5)/2})`.
    pub ratios: Vec<(u64, f64)>,
    /// Constant fitted on `l ≤ fit_l`.
    pub constant: f64,
    pub fit_l: u64,
    /// Every shell up to `l_max` stays under the fitted constant.
    pub pass: bool,
}

/// Fit the constant of the cell-decay inequality on the inner shells and
/// check that the outer shells respect it.
pub fn cell_decay_check(dim: usize, l_max: u64, fit_l: u64) -> Result<CellDecayReport> {
    if dim != 1 && dim != 2 {
        return config("dimension must be 1 or 2");
    }
    let expo = (3.0 * dim as f64 + 5.0) / 2.0;
    let ratios: Vec<(u64, f64)> = (0..=l_max)
        .into_par_iter()
        .map(|l| {
            let li = l as i64;
            // by symmetry the shell maximum is attained on r with r_0 = l ≥ |r_1|
            let best = if dim == 1 {
                cell_weight(&[li])
            } else {
                (0..=li).map(|s| cell_weight(&[li, s])).fold(0.0, f64::max)
            };
            (l, best * ((l * l) as f64 + 1.0).powf(expo))
        })
        .collect();
    let constant = ratios.iter().filter(|(l, _)| *l <= fit_l).map(|(_, r)| *r).fold(0.0, f64::max);
    let pass = ratios.iter().all(|(_, r)| *r <= constant * (1.0 + 1e-12));
    Ok(CellDecayReport { dim, ratios, constant, fit_l, pass })
}

/// Rows `mode,coordinate,lambda_tilde`.
pub fn embedding_csv(z: &[f64], lambda: &[f64]) -> String {
    let mut out = String::from("mode,coordinate,lambda_tilde\n");
    for (i, (a, l)) in z.iter().zip(lambda).enumerate() {
        out.push_str(&format!("{},{:.17e},{:.17e}\n", i + 1, a, l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(y: f64, m: u64) -> Configuration {
        Configuration::new(1, 5.0, vec![Particle { y: vec![y], m }]).unwrap()
    }

    #[test]
    fn occupation_half_open() {
        assert_eq!(occupation_count(&Configuration::empty(1, 3.0), &[0]), 0);
        assert_eq!(occupation_count(&single(0.0, 3), &[0]), 3);
        let edge = single(0.5, 1);
        assert_eq!(occupation_count(&edge, &[0]), 0);
        assert_eq!(occupation_count(&edge, &[1]), 1);
        assert_eq!(occupation_count(&single(-0.5, 1), &[0]), 1);
    }

    #[test]
    fn membership_truth_table() {
        let n = 4;
        assert!(u_n_membership(&Configuration::empty(2, 3.0), n, 3).unwrap().member);
        assert!(u_n_membership(&single(0.0, n), n, 0).unwrap().member);
        let over = u_n_membership(&single(0.0, n + 1), n, 0).unwrap();
        assert!(!over.member);
        assert_eq!(over.worst_l, 0);
        assert!(u_n_membership(&single(3.0, 1), n, 2).is_err());
    }

    #[test]
    fn ruelle_geometric_sum() {
        let p = RuelleParams { gamma: 1.0, delta: 0.0 };
        // γN² - e^δ = N² - 1; pick γ so that it equals ln 2 at N = 1
        let half = RuelleParams { gamma: 1.0 + std::f64::consts::LN_2, delta: 0.0 };
        assert!((ruelle_tail_bound(half, 1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(geometric_tail(0.5), 1.0);
        assert!(ruelle_tail_bound(p, 1).is_err());
        let b: Vec<f64> = [5, 10, 20].iter().map(|&n| ruelle_tail_bound(RuelleParams { gamma: 0.1, delta: 0.5 }, n).unwrap()).collect();
        assert!(b[0] > b[1] && b[1] > b[2]);
    }

    #[test]
    fn cubic_weights_reproduce_cubics() {
        for &s in &[0.0, 0.25, 0.5, 0.9] {
            let w = cubic_weights(s);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            let f = |x: f64| 2.0 - x + 0.5 * x * x - 0.3 * x * x * x;
            let v: f64 = w.iter().zip([-1.0, 0.0, 1.0, 2.0]).map(|(a, x)| a * f(x)).sum();
            assert!((v - f(s)).abs() < 1e-13);
        }
    }

    #[test]
    fn shell_series_matches_zeta() {
        // ζ(3) - 1
        assert!((shell_series(1) - 0.202_056_903_159_594_3).abs() < 1e-12);
    }

    #[test]
    fn poisson_window_and_determinism() {
        let a = sample_poisson_config(2, 0.5, 3.0, 11, 0).unwrap();
        let b = sample_poisson_config(2, 0.5, 3.0, 11, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.points.iter().all(|p| p.y.iter().all(|c| c.abs() <= 3.0)));
    }

    #[test]
    fn saturated_reference_is_on_the_boundary_of_u_n() {
        let c = saturated_reference(2, 4.0, 3).unwrap();
        let m = u_n_membership(&c, 3, covering_l_max(&c)).unwrap();
        assert!(m.member);
        assert!((m.worst_ratio - 1.0).abs() < 1e-15);
    }
}
