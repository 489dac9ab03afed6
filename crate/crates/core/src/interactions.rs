//! Wick-ordered interactions and Gibbs reweighting of the free field.
//!
//! Wick ordering is taken with respect to the truncated covariance: the
//! pointwise variance `c(x)` of the finite-mode field plays the role of the
//! (divergent) continuum subtraction.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::free_field::{EmpiricalFunctional, FieldSamples, FreeFieldModel, TestFunction};
use crate::spectral::GridSpec;
use crate::stats::{effective_sample_size, pairwise_sum, ratio_estimate, Estimate};

/// Upper limit on the charge for the exponential and trigonometric models.
pub const CHARGE_LIMIT: f64 = 3.544_907_701_811_032; // sqrt(4π)

pub const MAX_POLY_DEGREE: u32 = 4;

/// Probabilists' Hermite polynomial `He_n(x)` by the three-term recursion.
pub fn hermite_he(n: u32, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    if n == 0 {
        return a;
    }
    for k in 1..n {
        let next = x * b - k as f64 * a;
        a = b;
        b = next;
    }
    b
}

/// `c^{n/2} He_n(φ / sqrt(c))`, evaluated without the division through the
/// scaled recursion `W_{k+1} = φ W_k - k c W_{k-1}`.
pub fn wick_monomial(n: u32, phi: f64, c: f64) -> f64 {
    let (mut a, mut b) = (1.0, phi);
    if n == 0 {
        return a;
    }
    for k in 1..n {
        let next = phi * b - k as f64 * c * a;
        a = b;
        b = next;
    }
    b
}

#[derive(Debug, Clone, PartialEq)]
pub struct WickContext {
    /// Pointwise variance of the truncated field on the grid.
    pub variance: Vec<f64>,
}

/// `c(x) = Σ_ij C_ij φ_i(x) φ_j(x)`.
pub fn pointwise_variance(model: &FreeFieldModel) -> WickContext {
    let phi = &model.es.basis;
    let pc = phi * &model.cov;
    let variance = (0..phi.nrows())
        .map(|x| (0..phi.ncols()).map(|j| pc[(x, j)] * phi[(x, j)]).sum::<f64>())
        .collect();
    WickContext { variance }
}

pub fn wick_power(field: &[f64], n: u32, ctx: &WickContext) -> Vec<f64> {
    field
        .iter()
        .zip(&ctx.variance)
        .map(|(&p, &c)| wick_monomial(n, p, c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    Free,
    Exp,
    Poly,
    Sin,
    Cos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CutoffShape {
    /// Smooth compactly supported bump `exp(1 - 1/(1 - (|x|/R)²))`.
    #[default]
    Bump,
    Gaussian,
    Indicator,
}

/// Nonnegative space cut-off on the grid, normalized to unit mass.
pub fn cutoff(grid: &GridSpec, shape: CutoffShape, radius: f64) -> Result<Vec<f64>> {
    if !(radius > 0.0) {
        return config(format!("cut-off radius must be positive, got {radius}"));
    }
    let raw: Vec<f64> = (0..grid.len())
        .map(|i| {
            let r2 = grid.norm_sq_at(i) / (radius * radius);
            match shape {
                CutoffShape::Bump => {
                    if r2 < 1.0 {
                        (1.0 - 1.0 / (1.0 - r2)).exp()
                    } else {
                        0.0
                    }
                }
                CutoffShape::Gaussian => (-0.5 * r2).exp(),
                CutoffShape::Indicator => {
                    if r2 <= 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect();
    let mass = raw.iter().sum::<f64>() * grid.cell_volume();
    if !(mass > 0.0) {
        return config("cut-off vanishes on the grid");
    }
    Ok(raw.into_iter().map(|g| g / mass).collect())
}

/// Default cut-off: a unit-mass bump on the central half of the grid.
pub fn default_cutoff(grid: &GridSpec) -> Vec<f64> {
    cutoff(grid, CutoffShape::Bump, 0.5 * grid.half_width).expect("grid half-width is positive")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    #[serde(default)]
    pub charge: f64,
    #[serde(default)]
    pub coupling: f64,
    #[serde(default = "one")]
    pub degree: u32,
    pub cutoff: Vec<f64>,
    /// Admit `|a0| >= sqrt(4π)` for experiments.
    #[serde(default)]
    pub allow_large_charge: bool,
}

fn one() -> u32 {
    1
}

impl PotentialSpec {
    pub fn free(cutoff: Vec<f64>) -> Self {
        Self { kind: PotentialKind::Free, charge: 0.0, coupling: 0.0, degree: 1, cutoff, allow_large_charge: false }
    }

    pub fn exp(charge: f64, cutoff: Vec<f64>) -> Self {
        Self { kind: PotentialKind::Exp, charge, coupling: 1.0, degree: 1, cutoff, allow_large_charge: false }
    }

    pub fn poly(degree: u32, coupling: f64, cutoff: Vec<f64>) -> Self {
        Self { kind: PotentialKind::Poly, charge: 0.0, coupling, degree, cutoff, allow_large_charge: false }
    }

    pub fn trig(kind: PotentialKind, charge: f64, coupling: f64, cutoff: Vec<f64>) -> Self {
        Self { kind, charge, coupling, degree: 1, cutoff, allow_large_charge: false }
    }

    pub fn validate(&self, grid_len: usize) -> Result<()> {
        if self.cutoff.len() != grid_len {
            return Err(Error::DimensionMismatch(format!(
                "cut-off has {} values, grid has {grid_len}",
                self.cutoff.len()
            )));
        }
        if self.cutoff.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return config("cut-off must be finite and nonnegative");
        }
        let charged = matches!(self.kind, PotentialKind::Exp | PotentialKind::Sin | PotentialKind::Cos);
        if charged && !self.allow_large_charge && self.charge.abs() >= CHARGE_LIMIT {
            return config(format!("|a0| = {} must be below sqrt(4π)", self.charge.abs()));
        }
        if self.coupling < 0.0 {
            return config("coupling must be nonnegative");
        }
        if self.kind == PotentialKind::Poly && !(1..=MAX_POLY_DEGREE).contains(&self.degree) {
            return config(format!("polynomial degree n = {} outside 1..=4", self.degree));
        }
        Ok(())
    }
}

/// Value of the interaction for a field given by its grid values.
pub fn potential_value(spec: &PotentialSpec, field: &[f64], ctx: &WickContext, cell_volume: f64) -> Result<f64> {
    if field.len() != ctx.variance.len() || spec.cutoff.len() != field.len() {
        return Err(Error::DimensionMismatch("field, cut-off and Wick context differ in length".into()));
    }
    let a = spec.charge;
    let terms = field.iter().zip(&ctx.variance).zip(&spec.cutoff).map(|((&p, &c), &g)| {
        if g == 0.0 {
            return 0.0;
        }
        g * match spec.kind {
            PotentialKind::Free => 0.0,
            PotentialKind::Exp => (a * p - 0.5 * a * a * c).exp(),
            PotentialKind::Poly => spec.coupling * wick_monomial(2 * spec.degree, p, c),
            PotentialKind::Sin => spec.coupling * (0.5 * a * a * c).exp() * (a * p).sin(),
            PotentialKind::Cos => spec.coupling * (0.5 * a * a * c).exp() * (a * p).cos(),
        }
    });
    Ok(terms.sum::<f64>() * cell_volume)
}

/// Potential evaluated for every sample (coordinates are synthesized into
/// grid fields first).
pub fn potentials(spec: &PotentialSpec, base: &FreeFieldModel, ctx: &WickContext, samples: &FieldSamples) -> Result<Vec<f64>> {
    let cv = base.es.cell_volume;
    (0..samples.len())
        .into_par_iter()
        .map(|n| potential_value(spec, &base.es.synthesize(samples.row(n)), ctx, cv))
        .collect()
}

/// Normalizing-constant estimate and the importance weights behind it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZEstimate {
    pub z: Estimate,
    pub log_z: f64,
    pub ess: f64,
    pub samples: usize,
    /// Set when fewer than 0.1% of the samples carry the estimate.
    pub degenerate: bool,
}

/// `Z = E_{ν0}[e^{-V}]` accumulated in log space.
pub fn estimate_z(spec: &PotentialSpec, base: &FreeFieldModel, ctx: &WickContext, samples: &FieldSamples) -> Result<(ZEstimate, Vec<f64>)> {
    spec.validate(ctx.variance.len())?;
    let v = potentials(spec, base, ctx, samples)?;
    z_from_potentials(spec.kind, &v)
}

/// Returns the estimate and the weights `e^{-V}` rescaled by `e^{shift}`
/// so that the largest weight is 1.
pub fn z_from_potentials(kind: PotentialKind, v: &[f64]) -> Result<(ZEstimate, Vec<f64>)> {
    let n = v.len();
    if n == 0 {
        return config("no samples");
    }
    if kind == PotentialKind::Free {
        let z = ZEstimate { z: Estimate::exact(1.0), log_z: 0.0, ess: n as f64, samples: n, degenerate: false };
        return Ok((z, vec![1.0; n]));
    }
    if kind == PotentialKind::Exp {
        for (i, vi) in v.iter().enumerate() {
            let w = (-vi).exp();
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::Numeric(format!("sample {i}: e^-V = {w:e} outside (0, 1]")));
            }
        }
    }
    let shift = v.iter().map(|x| -x).fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::Numeric("potential is not finite".into()));
    }
    let w: Vec<f64> = v.iter().map(|x| (-x - shift).exp()).collect();
    let mean_w = pairwise_sum(&w) / n as f64;
    let dev: Vec<f64> = w.iter().map(|x| (x - mean_w).powi(2)).collect();
    let sd = if n > 1 { (pairwise_sum(&dev) / (n - 1) as f64).sqrt() } else { 0.0 };
    let scale = shift.exp();
    let ess = effective_sample_size(&w);
    let z = ZEstimate {
        z: Estimate { value: mean_w * scale, stderr: sd / (n as f64).sqrt() * scale },
        log_z: mean_w.ln() + shift,
        ess,
        samples: n,
        degenerate: ess < 1e-3 * n as f64,
    };
    Ok((z, w))
}

/// A Gibbs measure `Z^{-1} e^{-V} ν0`, with its normalizing constant
/// estimated from free-field samples.
#[derive(Debug, Clone)]
pub struct GibbsModel {
    pub base: Arc<FreeFieldModel>,
    pub potential: PotentialSpec,
    pub ctx: WickContext,
    pub z: ZEstimate,
}

impl GibbsModel {
    pub fn new(base: Arc<FreeFieldModel>, potential: PotentialSpec, samples: &FieldSamples) -> Result<(Self, Vec<f64>)> {
        let ctx = pointwise_variance(&base);
        let (z, w) = estimate_z(&potential, &base, &ctx, samples)?;
        Ok((Self { base, potential, ctx, z }, w))
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn potential_at(&self, x: &[f64]) -> f64 {
        let field = self.base.es.synthesize(x);
        potential_value(&self.potential, &field, &self.ctx, self.base.es.cell_volume)
            .expect("context built from the same model")
    }

    /// Importance weights `e^{-V}` (up to a common factor) for samples of
    /// the base field.
    pub fn weights(&self, samples: &FieldSamples) -> Result<Vec<f64>> {
        let v = potentials(&self.potential, &self.base, &self.ctx, samples)?;
        Ok(z_from_potentials(self.potential.kind, &v)?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reweighted {
    pub estimate: Estimate,
    pub ess: f64,
    /// Effective sample size dropped below 100.
    pub warning: bool,
}

/// `E_ν[F] = E_{ν0}[F e^{-V}] / Z` as a self-normalized ratio estimate.
pub fn reweighted_expectation(samples: &FieldSamples, weights: &[f64], observable: impl Fn(&[f64]) -> f64 + Sync) -> Reweighted {
    let values: Vec<f64> = (0..samples.len()).into_par_iter().map(|n| observable(samples.row(n))).collect();
    let estimate = ratio_estimate(weights, &values);
    let ess = effective_sample_size(weights);
    Reweighted { estimate, ess, warning: ess < 100.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    /// `|||ϕ|||`.
    pub r: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// Right-hand side `Z^{-1} (2 (e^{r²/2} - 1) + r)` for the exponential model.
pub fn exp_bound_rhs(z: f64, r: f64) -> f64 {
    (2.0 * (0.5 * r * r).exp_m1() + r) / z
}

/// Continuity at the origin of the exponential model's characteristic
/// functional.
pub fn continuity_bound_exp(gm: &GibbsModel, phi: &TestFunction, samples: &FieldSamples, weights: &[f64]) -> Result<BoundCheck> {
    if gm.potential.kind != PotentialKind::Exp {
        return config("continuity_bound_exp needs an exponential model");
    }
    let r = crate::free_field::triple_norm(&gm.base, phi)?;
    let f = EmpiricalFunctional::weighted(samples, weights);
    let d = f.difference(phi, &TestFunction::zero(phi.coefficients.len()));
    let lhs = d.value().norm();
    let rhs = exp_bound_rhs(gm.z.z.value, r);
    let stderr = d.stderr();
    Ok(BoundCheck { r, lhs, rhs, stderr, pass: lhs <= rhs + 5.0 * stderr })
}

/// `2 s^{1/2} {1 + e^{2s} s^{1/2} (1 + 2^{1/2} s^{1/2})}`, the prefactor of
/// the fourth-moment bound for the polynomial and trigonometric models.
/// `s` is the variance `|||ϕ|||²` of `<φ, ϕ>` under the free field.
pub fn holder_prefactor(s: f64) -> f64 {
    let rs = s.sqrt();
    2.0 * rs * (1.0 + (2.0 * s).exp() * rs * (1.0 + std::f64::consts::SQRT_2 * rs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderBoundCheck {
    pub bound: BoundCheck,
    /// `(E_{ν0}[F⁴])^{1/4}` with `F = e^{-V} / Z`.
    pub fourth_root_moment: f64,
    pub ess_warning: bool,
}

pub fn continuity_bound_poly_trig(gm: &GibbsModel, phi: &TestFunction, samples: &FieldSamples, weights: &[f64]) -> Result<HolderBoundCheck> {
    if !matches!(gm.potential.kind, PotentialKind::Poly | PotentialKind::Sin | PotentialKind::Cos) {
        return config("continuity_bound_poly_trig needs a polynomial or trigonometric model");
    }
    let r = crate::free_field::triple_norm(&gm.base, phi)?;
    let n = weights.len() as f64;
    // weights are e^{-V} up to a common factor; that factor cancels in F
    let mean_w = pairwise_sum(weights) / n;
    let w4: Vec<f64> = weights.iter().map(|w| (w / mean_w).powi(4)).collect();
    let fourth = (pairwise_sum(&w4) / n).powf(0.25);
    let f = EmpiricalFunctional::weighted(samples, weights);
    let d = f.difference(phi, &TestFunction::zero(phi.coefficients.len()));
    let lhs = d.value().norm();
    let rhs = holder_prefactor(r * r) * fourth;
    let stderr = d.stderr();
    Ok(HolderBoundCheck {
        bound: BoundCheck { r, lhs, rhs, stderr, pass: lhs <= rhs + 5.0 * stderr },
        fourth_root_moment: fourth,
        ess_warning: effective_sample_size(weights) < 100.0,
    })
}

/// Exact integer verdicts for the auxiliary factorial inequalities of the
/// fourth-moment bound, plus their floating-point sides at a given `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuxInequality {
    pub k: u32,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

fn factorial_u128(n: u32) -> u128 {
    (1..=n as u128).product()
}

fn double_factorial_u128(n: i64) -> u128 {
    if n <= 0 {
        1
    } else {
        (1..=n as u128).rev().step_by(2).product()
    }
}

/// `(1/k!) ((4k-1)!! r^{2k})^{1/4} ≤ (4r)^{k/2} / sqrt(k!)`. Raising both
/// sides to the fourth power, `r` cancels and the claim is
/// `(4k-1)!! ≤ 16^k (k!)²`.
pub fn aux_moment_inequality(k: u32, r: f64) -> Result<AuxInequality> {
    if k == 0 || k > 12 {
        return config("k must lie in 1..=12");
    }
    let kf = factorial_u128(k);
    let lhs_int = double_factorial_u128(4 * k as i64 - 1);
    let rhs_int = 16u128.pow(k) * kf * kf;
    let lhs = (lhs_int as f64 * r.powi(2 * k as i32)).powf(0.25) / kf as f64;
    let rhs = (4.0 * r).powf(k as f64 / 2.0) / (kf as f64).sqrt();
    Ok(AuxInequality { k, lhs, rhs, holds: lhs_int <= rhs_int })
}

/// `(k!)^{-1/2} ≤ 2^{-k/2} / (l-1)!` for `k = 2l`, i.e. `2^k ((l-1)!)² ≤ k!`.
pub fn aux_even_factorial_inequality(k: u32) -> Result<AuxInequality> {
    if k == 0 || k % 2 != 0 || k > 24 {
        return config("k must be even and in 2..=24");
    }
    let l = k / 2;
    let fl = factorial_u128(l - 1);
    let kf = factorial_u128(k);
    Ok(AuxInequality {
        k,
        lhs: 1.0 / (kf as f64).sqrt(),
        rhs: 2f64.powf(-(k as f64) / 2.0) / fl as f64,
        holds: (1u128 << k) * fl * fl <= kf,
    })
}

/// `(k!)^{-1/2} ≤ 2^{-k/2} / (l-2)!` for `k = 2l - 1`, `l ≥ 2`, i.e.
/// `2^k ((l-2)!)² ≤ k!`.
pub fn aux_odd_factorial_inequality(k: u32) -> Result<AuxInequality> {
    if k < 3 || k % 2 != 1 || k > 25 {
        return config("k must be odd and in 3..=25");
    }
    let l = (k + 1) / 2;
    let fl = factorial_u128(l - 2);
    let kf = factorial_u128(k);
    Ok(AuxInequality {
        k,
        lhs: 1.0 / (kf as f64).sqrt(),
        rhs: 2f64.powf(-(k as f64) / 2.0) / fl as f64,
        holds: (1u128 << k) * fl * fl <= kf,
    })
}

/// Bound-scan rows: `r,lhs,rhs,stderr,pass`.
pub fn bound_scan_csv(rows: &[BoundCheck]) -> String {
    let mut out = String::from("r,lhs,rhs,stderr,pass\n");
    for b in rows {
        out.push_str(&format!("{:.17e},{:.17e},{:.17e},{:.17e},{}\n", b.r, b.lhs, b.rhs, b.stderr, b.pass));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_low_orders() {
        for &x in &[-2.0, -0.3, 0.0, 1.7] {
            assert_eq!(hermite_he(0, x), 1.0);
            assert_eq!(hermite_he(1, x), x);
            assert!((hermite_he(2, x) - (x * x - 1.0)).abs() < 1e-14);
            assert!((hermite_he(3, x) - (x * x * x - 3.0 * x)).abs() < 1e-13);
            assert!((hermite_he(4, x) - (x.powi(4) - 6.0 * x * x + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn wick_monomial_matches_scaled_hermite() {
        for &(p, c) in &[(0.4f64, 0.7f64), (-1.3, 2.0), (3.0, 0.1)] {
            for n in 0..8 {
                let direct = c.powf(n as f64 / 2.0) * hermite_he(n, p / c.sqrt());
                assert!((wick_monomial(n, p, c) - direct).abs() < 1e-10 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn wick_power_low_orders() {
        let ctx = WickContext { variance: vec![0.5, 1.5] };
        let field = [0.3, -2.0];
        assert_eq!(wick_power(&field, 0, &ctx), vec![1.0, 1.0]);
        assert_eq!(wick_power(&field, 1, &ctx), field.to_vec());
        let w2 = wick_power(&field, 2, &ctx);
        assert!((w2[0] - (0.09 - 0.5)).abs() < 1e-15);
        assert!((w2[1] - (4.0 - 1.5)).abs() < 1e-15);
    }

    #[test]
    fn charge_and_degree_validation() {
        let g = vec![1.0; 4];
        assert!(PotentialSpec::exp(3.6, g.clone()).validate(4).is_err());
        let mut s = PotentialSpec::exp(3.6, g.clone());
        s.allow_large_charge = true;
        assert!(s.validate(4).is_ok());
        assert!(PotentialSpec::poly(5, 0.1, g.clone()).validate(4).is_err());
        assert!(PotentialSpec::exp(1.0, vec![-1.0; 4]).validate(4).is_err());
        assert!(PotentialSpec::exp(1.0, g).validate(5).is_err());
    }

    #[test]
    fn exp_with_zero_charge_is_cutoff_mass() {
        let ctx = WickContext { variance: vec![0.3; 4] };
        let spec = PotentialSpec::exp(0.0, vec![0.5, 1.0, 0.0, 2.0]);
        let v = potential_value(&spec, &[1.0, -2.0, 3.0, 0.1], &ctx, 0.25).unwrap();
        assert!((v - 0.25 * 3.5).abs() < 1e-15);
    }

    #[test]
    fn free_potential_has_unit_z() {
        let (z, w) = z_from_potentials(PotentialKind::Free, &[0.0; 10]).unwrap();
        assert_eq!(z.z.value, 1.0);
        assert_eq!(w, vec![1.0; 10]);
    }

    #[test]
    fn exp_bound_rhs_at_unit_r() {
        let z = 0.8;
        let expected = (2.0 * (0.5f64.exp() - 1.0) + 1.0) / z;
        assert!((exp_bound_rhs(z, 1.0) - expected).abs() < 1e-15);
        assert_eq!(exp_bound_rhs(0.5, 0.0), 0.0);
        assert_eq!(holder_prefactor(0.0), 0.0);
    }

    #[test]
    fn aux_inequalities_exact_values() {
        let a = aux_moment_inequality(1, 1.0).unwrap();
        assert!((a.lhs - 3f64.powf(0.25)).abs() < 1e-15);
        assert!((a.rhs - 2.0).abs() < 1e-15);
        assert!(a.holds);
        // The even-k claim fails at k = 2 and the odd-k claim at k = 3.
        assert!(!aux_even_factorial_inequality(2).unwrap().holds);
        assert!(aux_even_factorial_inequality(4).unwrap().holds);
        assert!(!aux_odd_factorial_inequality(3).unwrap().holds);
        assert!(aux_odd_factorial_inequality(5).unwrap().holds);
    }

    #[test]
    fn cutoff_has_unit_mass_and_support() {
        let grid = GridSpec::new(1, 10.0, 64).unwrap();
        let g = default_cutoff(&grid);
        assert!((g.iter().sum::<f64>() * grid.cell_volume() - 1.0).abs() < 1e-12);
        assert!(g.iter().all(|v| *v >= 0.0));
        for i in 0..grid.len() {
            if grid.point(i)[0].abs() >= 5.0 {
                assert_eq!(g[i], 0.0);
            }
        }
    }
}
