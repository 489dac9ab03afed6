//! The coordinate-wise non-local form on cylinder functions.
//!
//! For each coordinate `i` the form integrates the product of increments of
//! `u` and `v` in the `i`-th variable against the singular kernel
//! `|y - x_i|^{-(1+α)}` and the one-coordinate conditional law of the
//! measure, then averages over the measure.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::free_field::{psd_root, sample_gaussian, FieldSamples, FreeFieldModel};
use crate::interactions::GibbsModel;
use crate::quadrature::GaussLegendre;
use crate::stats::{mean_stderr, ratio_estimate};

type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type Partial = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;

/// A function of finitely many coordinates. The evaluator receives the
/// coordinates listed in `support`, in that order.
#[derive(Clone)]
pub struct CylinderFunction {
    pub name: String,
    support: Vec<usize>,
    eval: Evaluator,
    partial: Option<Partial>,
    /// False for functions such as coordinate projections that lie outside
    /// the compactly supported smooth class.
    pub bounded: bool,
}

impl fmt::Debug for CylinderFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylinderFunction")
            .field("name", &self.name)
            .field("support", &self.support)
            .field("bounded", &self.bounded)
            .finish()
    }
}

impl CylinderFunction {
    pub fn new(
        name: impl Into<String>,
        support: Vec<usize>,
        bounded: bool,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let unique: BTreeSet<_> = support.iter().collect();
        if unique.len() != support.len() {
            return config("cylinder support lists a coordinate twice");
        }
        Ok(Self { name: name.into(), support, eval: Arc::new(f), partial: None, bounded })
    }

    /// Attach an analytic partial derivative: `p(restricted, k)` is the
    /// derivative in the `k`-th support coordinate.
    pub fn with_partial(mut self, p: impl Fn(&[f64], usize) -> f64 + Send + Sync + 'static) -> Self {
        self.partial = Some(Arc::new(p));
        self
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), vec![], true, move |_| c)
            .expect("empty support")
            .with_partial(|_, _| 0.0)
    }

    pub fn coordinate(i: usize) -> Self {
        Self::new(format!("x{i}"), vec![i], false, |r| r[0])
            .expect("single index")
            .with_partial(|_, _| 1.0)
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn position(&self, i: usize) -> Option<usize> {
        self.support.iter().position(|&j| j == i)
    }

    pub fn gather(&self, x: &[f64]) -> Vec<f64> {
        self.support.iter().map(|&j| x[j]).collect()
    }

    pub fn eval_restricted(&self, r: &[f64]) -> f64 {
        (self.eval)(r)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.eval_restricted(&self.gather(x))
    }

    /// Derivative in the `k`-th support coordinate, analytic if available and
    /// a central difference otherwise.
    pub fn partial_restricted(&self, r: &[f64], k: usize) -> f64 {
        if let Some(p) = &self.partial {
            return p(r, k);
        }
        let mut buf = r.to_vec();
        let step = 1e-6 * r[k].abs().max(1.0);
        buf[k] = r[k] + step;
        let up = self.eval_restricted(&buf);
        buf[k] = r[k] - step;
        let down = self.eval_restricted(&buf);
        (up - down) / (2.0 * step)
    }

    /// `Σ_t a_t u_t`, supported on the union of the supports.
    pub fn linear_combination(terms: &[(f64, &CylinderFunction)]) -> Self {
        let support: Vec<usize> = terms
            .iter()
            .flat_map(|(_, u)| u.support.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let maps: Vec<Vec<usize>> = terms
            .iter()
            .map(|(_, u)| u.support.iter().map(|j| support.iter().position(|s| s == j).unwrap()).collect())
            .collect();
        let parts: Vec<(f64, CylinderFunction, Vec<usize>)> =
            terms.iter().zip(maps).map(|((a, u), m)| (*a, (*u).clone(), m)).collect();
        let name = terms.iter().map(|(a, u)| format!("{a}*{}", u.name)).collect::<Vec<_>>().join("+");
        let bounded = terms.iter().all(|(_, u)| u.bounded);
        let parts = Arc::new(parts);
        let for_partial = parts.clone();
        Self::new(name, support, bounded, move |r| {
            parts
                .iter()
                .map(|(a, u, m)| {
                    let sub: Vec<f64> = m.iter().map(|&p| r[p]).collect();
                    a * u.eval_restricted(&sub)
                })
                .sum()
        })
        .expect("union is deduplicated")
        .with_partial(move |r, k| {
            for_partial
                .iter()
                .filter_map(|(a, u, m)| {
                    let pos = m.iter().position(|&p| p == k)?;
                    let sub: Vec<f64> = m.iter().map(|&p| r[p]).collect();
                    Some(a * u.partial_restricted(&sub, pos))
                })
                .sum()
        })
    }

    /// Unit contraction `min(max(u, 0), 1)`.
    pub fn contraction(&self) -> Self {
        let inner = self.clone();
        let for_partial = self.clone();
        Self {
            name: format!("clamp01({})", self.name),
            support: self.support.clone(),
            eval: Arc::new(move |r| inner.eval_restricted(r).clamp(0.0, 1.0)),
            partial: Some(Arc::new(move |r, k| {
                let u = for_partial.eval_restricted(r);
                if u > 0.0 && u < 1.0 {
                    for_partial.partial_restricted(r, k)
                } else {
                    0.0
                }
            })),
            bounded: true,
        }
    }
}

/// Serializable description of the cylinder functions the front-end offers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CylinderSpec {
    Constant { value: f64 },
    Coordinate { index: usize },
    /// `amplitude · sin(frequency · x_index + phase)`.
    Sin { index: usize, amplitude: f64, frequency: f64, #[serde(default)] phase: f64 },
    /// `amplitude · tanh(Σ c_j x_j + shift)`.
    Tanh { indices: Vec<usize>, coefficients: Vec<f64>, amplitude: f64, #[serde(default)] shift: f64 },
    /// `amplitude · exp(-|x_S - center|² / (2 width²))`.
    Bump { indices: Vec<usize>, center: Vec<f64>, width: f64, amplitude: f64 },
    /// `x_i · x_j` (unbounded).
    Product { i: usize, j: usize },
    Contraction { inner: Box<CylinderSpec> },
}

impl CylinderSpec {
    pub fn build(&self) -> Result<CylinderFunction> {
        Ok(match self {
            CylinderSpec::Constant { value } => CylinderFunction::constant(*value),
            CylinderSpec::Coordinate { index } => CylinderFunction::coordinate(*index),
            &CylinderSpec::Sin { index, amplitude, frequency, phase } => {
                CylinderFunction::new(format!("{amplitude}*sin({frequency}*x{index}+{phase})"), vec![index], true, move |r| {
                    amplitude * (frequency * r[0] + phase).sin()
                })?
                .with_partial(move |r, _| amplitude * frequency * (frequency * r[0] + phase).cos())
            }
            CylinderSpec::Tanh { indices, coefficients, amplitude, shift } => {
                if indices.len() != coefficients.len() {
                    return config("tanh: indices and coefficients differ in length");
                }
                let (c, c2, a, s) = (coefficients.clone(), coefficients.clone(), *amplitude, *shift);
                CylinderFunction::new(format!("{a}*tanh({indices:?}·{c:?}+{s})"), indices.clone(), true, move |r| {
                    a * (r.iter().zip(&c).map(|(x, w)| x * w).sum::<f64>() + s).tanh()
                })?
                .with_partial(move |r, k| {
                    let t = (r.iter().zip(&c2).map(|(x, w)| x * w).sum::<f64>() + s).tanh();
                    a * c2[k] * (1.0 - t * t)
                })
            }
            CylinderSpec::Bump { indices, center, width, amplitude } => {
                if indices.len() != center.len() {
                    return config("bump: indices and center differ in length");
                }
                if !(*width > 0.0) {
                    return config("bump width must be positive");
                }
                let (c, c2, w, a) = (center.clone(), center.clone(), *width, *amplitude);
                let gauss = move |r: &[f64], c: &[f64]| {
                    let d2: f64 = r.iter().zip(c).map(|(x, m)| (x - m).powi(2)).sum();
                    (-0.5 * d2 / (w * w)).exp()
                };
                CylinderFunction::new(format!("{a}*bump({indices:?})"), indices.clone(), true, move |r| a * gauss(r, &c))?
                    .with_partial(move |r, k| -a * gauss(r, &c2) * (r[k] - c2[k]) / (w * w))
            }
            &CylinderSpec::Product { i, j } => {
                if i == j {
                    CylinderFunction::new(format!("x{i}^2"), vec![i], false, |r| r[0] * r[0])?
                        .with_partial(|r, _| 2.0 * r[0])
                } else {
                    CylinderFunction::new(format!("x{i}*x{j}"), vec![i, j], false, |r| r[0] * r[1])?
                        .with_partial(|r, k| r[1 - k])
                }
            }
            CylinderSpec::Contraction { inner } => inner.build()?.contraction(),
        })
    }
}

/// Ten cylinder functions on the leading coordinates, most of them leaving
/// `[0, 1]` so that the unit contraction acts nontrivially.
pub fn standard_panel(k: usize) -> Result<Vec<CylinderFunction>> {
    if k < 3 {
        return config("the standard panel needs at least three coordinates");
    }
    use CylinderSpec::*;
    let specs = vec![
        Coordinate { index: 0 },
        Sin { index: 0, amplitude: 2.0, frequency: 1.5, phase: 0.3 },
        Sin { index: 1, amplitude: 1.0, frequency: 3.0, phase: 0.0 },
        Tanh { indices: vec![0, 1], coefficients: vec![1.0, -0.5], amplitude: 1.5, shift: 0.2 },
        Tanh { indices: vec![2], coefficients: vec![4.0], amplitude: 0.8, shift: 0.0 },
        Bump { indices: vec![0], center: vec![0.0], width: 0.5, amplitude: 3.0 },
        Bump { indices: vec![0, 2], center: vec![0.2, -0.1], width: 0.7, amplitude: 1.2 },
        Product { i: 0, j: 1 },
        Product { i: 1, j: 1 },
        Tanh { indices: vec![0, 1, 2], coefficients: vec![0.7, 0.7, 0.7], amplitude: 2.5, shift: -0.5 },
    ];
    specs.iter().map(CylinderSpec::build).collect()
}

/// `(u(y) - u(y')) (v(y) - v(y')) / |y - y'|^{1+α}` with coordinate `i` of
/// `x` replaced by `y` and `y'`.
pub fn phi_alpha(u: &CylinderFunction, v: &CylinderFunction, i: usize, y: f64, y2: f64, x: &[f64], alpha: f64) -> Result<f64> {
    if y == y2 {
        return domain("the kernel is singular on the diagonal y = y'");
    }
    let (Some(pu), Some(pv)) = (u.position(i), v.position(i)) else {
        return Ok(0.0);
    };
    let du = increment(u, pu, x, y, y2);
    let dv = increment(v, pv, x, y, y2);
    Ok(du * dv / (y - y2).abs().powf(alpha + 1.0))
}

fn increment(u: &CylinderFunction, pos: usize, x: &[f64], y: f64, y2: f64) -> f64 {
    let mut r = u.gather(x);
    r[pos] = y;
    let a = u.eval_restricted(&r);
    r[pos] = y2;
    a - u.eval_restricted(&r)
}

/// A centered Gaussian on the coordinates with its precision matrix, which
/// gives the one-coordinate conditionals directly.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    pub cov: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub root: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
            return Err(Error::DimensionMismatch("covariance must be square and nonempty".into()));
        }
        let root = psd_root(&cov)?;
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| Error::Numeric("covariance is singular".into()))?;
        let mut precision = chol.inverse();
        crate::spectral::symmetrize(&mut precision);
        Ok(Self { cov, precision, root })
    }

    pub fn from_model(model: &FreeFieldModel) -> Result<Self> {
        Self::new(model.cov.clone())
    }

    /// Conditional mean and variance of coordinate `i` given the others.
    pub fn conditional_moments(&self, i: usize, x: &[f64]) -> (f64, f64) {
        let p = &self.precision;
        let pii = p[(i, i)];
        let s: f64 = (0..x.len()).filter(|&j| j != i).map(|j| p[(i, j)] * x[j]).sum();
        (-s / pii, 1.0 / pii)
    }

    /// `-xᵀ P x / 2`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let k = x.len();
        let mut q = 0.0;
        for a in 0..k {
            for b in 0..k {
                q += x[a] * self.precision[(a, b)] * x[b];
            }
        }
        -0.5 * q
    }

    pub fn sample(&self, count: usize, seed: u64) -> FieldSamples {
        sample_gaussian(&self.root, count, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityRepr {
    Gaussian { mean: f64, var: f64 },
    /// Log-density on uniform nodes `start + k·step`, normalized so that the
    /// trapezoid rule over the nodes integrates the density to one.
    Tabulated { start: f64, step: f64, log_density: Vec<f64> },
}

/// Law of coordinate `index` given the other coordinates of `frozen`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalDensity {
    pub index: usize,
    pub frozen: Vec<f64>,
    pub repr: DensityRepr,
    /// Scale of the reference Gaussian conditional.
    pub scale: f64,
}

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl ConditionalDensity {
    pub fn gaussian(index: usize, frozen: Vec<f64>, mean: f64, var: f64) -> Self {
        Self { index, frozen, repr: DensityRepr::Gaussian { mean, var }, scale: var.sqrt() }
    }

    pub fn log_pdf(&self, y: f64) -> f64 {
        match &self.repr {
            DensityRepr::Gaussian { mean, var } => -0.5 * (y - mean).powi(2) / var - 0.5 * var.ln() - LOG_SQRT_2PI,
            DensityRepr::Tabulated { start, step, log_density } => {
                let n = log_density.len();
                let t = (y - start) / step;
                if !(t >= 0.0 && t <= (n - 1) as f64) {
                    return f64::NEG_INFINITY;
                }
                // three-point Lagrange interpolation of the log-density, which
                // is exact for a Gaussian conditional
                let k = (t.round() as usize).clamp(1, n - 2);
                let s = t - k as f64;
                let (a, b, c) = (log_density[k - 1], log_density[k], log_density[k + 1]);
                b + 0.5 * s * (c - a) + 0.5 * s * s * (c - 2.0 * b + a)
            }
        }
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.log_pdf(y).exp()
    }

    /// Interval outside which the density is negligible (or zero).
    pub fn support(&self) -> (f64, f64) {
        match &self.repr {
            DensityRepr::Gaussian { mean, var } => {
                let s = 12.0 * var.sqrt();
                (mean - s, mean + s)
            }
            DensityRepr::Tabulated { start, step, log_density } => (*start, start + step * (log_density.len() - 1) as f64),
        }
    }
}

/// Maximal number of tabulation nodes before a conditional is declared
/// under-resolved.
pub const MAX_TABLE_NODES: usize = (1 << 15) + 1;

/// Tabulate `exp(log_weight(y))` on `[lo, hi]`, doubling the resolution
/// until the trapezoid normalization changes by less than `1e-9` relatively.
pub fn tabulate(index: usize, frozen: Vec<f64>, scale: f64, lo: f64, hi: f64, mut log_weight: impl FnMut(f64) -> f64) -> Result<ConditionalDensity> {
    let mut n = 129;
    let mut prev: Option<(f64, Vec<f64>)> = None;
    loop {
        let step = (hi - lo) / (n - 1) as f64;
        let logw: Vec<f64> = match &prev {
            // reuse the coarse nodes, which are every other fine node
            Some((_, coarse)) => (0..n)
                .map(|k| if k % 2 == 0 { coarse[k / 2] } else { log_weight(lo + step * k as f64) })
                .collect(),
            None => (0..n).map(|k| log_weight(lo + step * k as f64)).collect(),
        };
        let shift = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::Numeric(format!("conditional of coordinate {index} has no mass on its table")));
        }
        let w: Vec<f64> = logw.iter().map(|l| (l - shift).exp()).collect();
        let trap = step * (w.iter().sum::<f64>() - 0.5 * (w[0] + w[n - 1]));
        let log_norm = trap.ln() + shift;
        if let Some((prev_norm, _)) = &prev {
            let err = (log_norm - prev_norm).abs();
            if err < 1e-9 {
                let log_density = logw.iter().map(|l| l - log_norm).collect();
                return Ok(ConditionalDensity { index, frozen, repr: DensityRepr::Tabulated { start: lo, step, log_density }, scale });
            }
            if n >= MAX_TABLE_NODES {
                if err < 1e-4 {
                    let log_density = logw.iter().map(|l| l - log_norm).collect();
                    return Ok(ConditionalDensity { index, frozen, repr: DensityRepr::Tabulated { start: lo, step, log_density }, scale });
                }
                return Err(Error::Numeric(format!(
                    "conditional of coordinate {index} under-resolved: normalization error {err:e}"
                )));
            }
        }
        prev = Some((log_norm, logw));
        n = 2 * n - 1;
    }
}

/// Access to a measure on the truncated coordinates through its
/// one-coordinate conditionals.
pub trait CoordinateMeasure: Sync {
    fn dim(&self) -> usize;

    /// Standard deviation of the Gaussian reference conditional of `i`; it
    /// sets the unit of jump sizes.
    fn scale(&self, i: usize) -> f64;

    /// `log ρ_i(y | x) - log ρ_i(x_i | x)`.
    fn log_ratio(&self, i: usize, x: &[f64], y: f64) -> f64;

    fn conditional(&self, i: usize, x: &[f64]) -> Result<ConditionalDensity>;

    /// Unnormalized log-density of the joint law.
    fn log_density(&self, x: &[f64]) -> f64;
}

impl CoordinateMeasure for GaussianMeasure {
    fn dim(&self) -> usize {
        self.cov.nrows()
    }

    fn scale(&self, i: usize) -> f64 {
        (1.0 / self.precision[(i, i)]).sqrt()
    }

    fn log_ratio(&self, i: usize, x: &[f64], y: f64) -> f64 {
        let (m, v) = self.conditional_moments(i, x);
        -0.5 * ((y - m).powi(2) - (x[i] - m).powi(2)) / v
    }

    fn conditional(&self, i: usize, x: &[f64]) -> Result<ConditionalDensity> {
        check_point(self.dim(), i, x)?;
        let (m, v) = self.conditional_moments(i, x);
        Ok(ConditionalDensity::gaussian(i, x.to_vec(), m, v))
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        GaussianMeasure::log_density(self, x)
    }
}

fn check_point(dim: usize, i: usize, x: &[f64]) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch(format!("point has {} coordinates, measure has {dim}", x.len())));
    }
    if i >= dim {
        return config(format!("coordinate {i} outside the {dim} kept modes"));
    }
    Ok(())
}

/// Gibbs measure `e^{-V} ν0 / Z` seen through its conditionals.
#[derive(Debug, Clone)]
pub struct GibbsMeasure {
    pub base: GaussianMeasure,
    pub model: Arc<GibbsModel>,
    /// Half-width of the conditional tables in reference standard deviations.
    pub table_sigmas: f64,
}

impl GibbsMeasure {
    pub fn new(model: Arc<GibbsModel>) -> Result<Self> {
        Ok(Self { base: GaussianMeasure::from_model(&model.base)?, model, table_sigmas: 8.0 })
    }
}

impl CoordinateMeasure for GibbsMeasure {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn scale(&self, i: usize) -> f64 {
        self.base.scale(i)
    }

    fn log_ratio(&self, i: usize, x: &[f64], y: f64) -> f64 {
        let mut z = x.to_vec();
        z[i] = y;
        self.base.log_ratio(i, x, y) - (self.model.potential_at(&z) - self.model.potential_at(x))
    }

    fn conditional(&self, i: usize, x: &[f64]) -> Result<ConditionalDensity> {
        check_point(self.dim(), i, x)?;
        let (m, v) = self.base.conditional_moments(i, x);
        let s = v.sqrt();
        let half = self.table_sigmas * s;
        let mut z = x.to_vec();
        tabulate(i, x.to_vec(), s, m - half, m + half, |y| {
            z[i] = y;
            -0.5 * (y - m).powi(2) / v - self.model.potential_at(&z)
        })
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.base.log_density(x) - self.model.potential_at(x)
    }
}

/// Inner one-dimensional rule of the form: a Taylor term on
/// `|y - x_i| < eps_quad`, Gauss-Legendre on geometric panels outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerRule {
    pub eps_quad: f64,
    pub panels: usize,
    pub order: usize,
    /// Relative size above which the outermost panel signals a tail that
    /// has not decayed.
    pub tail_tol: f64,
}

impl Default for InnerRule {
    fn default() -> Self {
        Self { eps_quad: 1e-4, panels: 48, order: 10, tail_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormEstimate {
    pub value: f64,
    pub stderr: f64,
    /// `(i, mean contribution of coordinate i)`.
    pub per_coordinate: Vec<(usize, f64)>,
    /// Set when an unbounded function was admitted.
    pub domain_extension: bool,
}

/// Outer-panel mass below which the tail test is not applied.
pub const TAIL_ABS_FLOOR: f64 = 1e-15;

struct InnerNodes {
    gl: GaussLegendre,
}

/// Inner integral `∫ ρ_i(y|x) (u(y)-u(x_i))(v(y)-v(x_i)) |y-x_i|^{-1-α} dy`.
fn inner_integral(
    u: &CylinderFunction,
    v: &CylinderFunction,
    pu: usize,
    pv: usize,
    cond: &ConditionalDensity,
    x: &[f64],
    alpha: f64,
    rule: &InnerRule,
    nodes: &InnerNodes,
) -> Result<f64> {
    let i = cond.index;
    let xi = x[i];
    let mut ru = u.gather(x);
    let mut rv = v.gather(x);
    let (u0, v0) = (u.eval_restricted(&ru), v.eval_restricted(&rv));
    let eps = rule.eps_quad;
    let near = u.partial_restricted(&ru, pu) * v.partial_restricted(&rv, pv) * cond.pdf(xi) * 2.0 * eps.powf(2.0 - alpha) / (2.0 - alpha);

    let (lo, hi) = cond.support();
    let mut far = 0.0;
    let mut last = 0.0;
    for (side, reach) in [(1.0, hi - xi), (-1.0, xi - lo)] {
        if reach <= eps {
            continue;
        }
        let ratio = (reach / eps).powf(1.0 / rule.panels as f64);
        let mut a = eps;
        let mut panel = 0.0;
        for p in 0..rule.panels {
            let b = if p + 1 == rule.panels { reach } else { a * ratio };
            panel = nodes.gl.integrate(a, b, |t| {
                let y = xi + side * t;
                ru[pu] = y;
                rv[pv] = y;
                let du = u.eval_restricted(&ru) - u0;
                let dv = v.eval_restricted(&rv) - v0;
                du * dv * cond.pdf(y) / t.powf(1.0 + alpha)
            });
            far += panel;
            a = b;
        }
        last += panel.abs();
    }
    let total = near + far;
    if !total.is_finite() || last > rule.tail_tol * total.abs() && last > TAIL_ABS_FLOOR {
        return Err(Error::Divergent(format!(
            "inner integral of coordinate {i} fails the tail test (outer panel {last:e}, total {total:e})"
        )));
    }
    Ok(total)
}

/// Monte-Carlo estimate of the form over outer samples of the measure
/// (importance-weighted when `weights` is given).
pub fn form_value<M: CoordinateMeasure>(
    u: &CylinderFunction,
    v: &CylinderFunction,
    measure: &M,
    alpha: f64,
    outer: &FieldSamples,
    weights: Option<&[f64]>,
    rule: &InnerRule,
) -> Result<FormEstimate> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return config(format!("α = {alpha} outside (0, 2)"));
    }
    let k = measure.dim();
    if outer.dim != k {
        return Err(Error::DimensionMismatch("outer samples and measure differ in dimension".into()));
    }
    if let Some(&bad) = u.support().iter().chain(v.support()).find(|&&i| i >= k) {
        return config(format!("cylinder support contains coordinate {bad} beyond the {k} kept modes"));
    }
    if outer.is_empty() {
        return config("no outer samples");
    }
    if let Some(w) = weights {
        if w.len() != outer.len() {
            return Err(Error::DimensionMismatch("weights and samples differ in length".into()));
        }
    }
    let union: Vec<usize> = u.support().iter().chain(v.support()).copied().collect::<BTreeSet<_>>().into_iter().collect();
    let active: Vec<(usize, usize, usize)> =
        union.iter().filter_map(|&i| Some((i, u.position(i)?, v.position(i)?))).collect();
    let nodes = InnerNodes { gl: GaussLegendre::new(rule.order) };

    let rows: Vec<Vec<f64>> = (0..outer.len())
        .into_par_iter()
        .map(|n| {
            let x = outer.row(n);
            active
                .iter()
                .map(|&(i, pu, pv)| {
                    let cond = measure.conditional(i, x)?;
                    inner_integral(u, v, pu, pv, &cond, x, alpha, rule, &nodes)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let totals: Vec<f64> = rows.iter().map(|r| r.iter().sum()).collect();
    let est = match weights {
        Some(w) => ratio_estimate(w, &totals),
        None => mean_stderr(&totals),
    };
    let per_coordinate = union
        .iter()
        .map(|&i| match active.iter().position(|a| a.0 == i) {
            Some(p) => {
                let col: Vec<f64> = rows.iter().map(|r| r[p]).collect();
                let m = match weights {
                    Some(w) => ratio_estimate(w, &col).value,
                    None => mean_stderr(&col).value,
                };
                (i, m)
            }
            None => (i, 0.0),
        })
        .collect();
    Ok(FormEstimate {
        value: est.value,
        stderr: est.stderr,
        per_coordinate,
        domain_extension: !(u.bounded && v.bounded),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal(k: usize) -> GaussianMeasure {
        GaussianMeasure::new(DMatrix::identity(k, k)).unwrap()
    }

    #[test]
    fn phi_alpha_basic_values() {
        let x = [0.3, -1.0];
        let c = CylinderFunction::constant(2.0);
        let p = CylinderFunction::coordinate(0);
        let s = CylinderSpec::Sin { index: 0, amplitude: 1.0, frequency: 2.0, phase: 0.0 }.build().unwrap();
        assert_eq!(phi_alpha(&c, &s, 0, 1.0, 0.0, &x, 1.0).unwrap(), 0.0);
        assert_eq!(phi_alpha(&p, &p, 0, 1.0, 0.0, &x, 1.0).unwrap(), 1.0);
        let a = phi_alpha(&s, &p, 0, 0.7, -0.4, &x, 0.5).unwrap();
        let b = phi_alpha(&s, &p, 0, -0.4, 0.7, &x, 0.5).unwrap();
        assert_eq!(a, b);
        assert!(phi_alpha(&p, &p, 0, 0.5, 0.5, &x, 1.0).is_err());
        assert_eq!(phi_alpha(&p, &p, 1, 0.5, 0.2, &x, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn cylinder_ignores_off_support() {
        let u = standard_panel(4).unwrap();
        let mut x = vec![0.2, -0.3, 0.5, 1.1];
        for f in &u {
            let before = f.value(&x);
            x[3] += 7.0;
            assert_eq!(f.value(&x), before, "{}", f.name);
            x[3] -= 7.0;
        }
    }

    #[test]
    fn analytic_partials_match_differences() {
        let x = [0.4, -0.2, 0.9];
        for f in standard_panel(3).unwrap() {
            let r = f.gather(&x);
            for k in 0..r.len() {
                let h = 1e-6;
                let mut a = r.clone();
                a[k] += h;
                let mut b = r.clone();
                b[k] -= h;
                let fd = (f.eval_restricted(&a) - f.eval_restricted(&b)) / (2.0 * h);
                assert!((fd - f.partial_restricted(&r, k)).abs() < 1e-6, "{}", f.name);
            }
        }
    }

    #[test]
    fn gaussian_conditional_two_modes() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.5]);
        let g = GaussianMeasure::new(cov).unwrap();
        let x = [0.0, 0.8];
        let (m, v) = g.conditional_moments(0, &x);
        assert!((m - 0.6 / 1.5 * 0.8).abs() < 1e-12);
        assert!((v - (2.0 - 0.36 / 1.5)).abs() < 1e-12);
        let d = std_normal(3).conditional(1, &[4.0, 0.0, -3.0]).unwrap();
        assert_eq!(d.repr, DensityRepr::Gaussian { mean: 0.0, var: 1.0 });
    }

    #[test]
    fn tabulated_gaussian_is_exact_up_to_normalization() {
        let d = tabulate(0, vec![0.0], 0.5, -4.0, 4.0, |y| -0.5 * (y / 0.5).powi(2)).unwrap();
        let g = ConditionalDensity::gaussian(0, vec![0.0], 0.0, 0.25);
        for k in 0..200 {
            let y = -3.9 + 0.039 * k as f64;
            assert!((d.pdf(y) - g.pdf(y)).abs() < 1e-8);
        }
        assert_eq!(d.pdf(5.0), 0.0);
    }

    #[test]
    fn form_of_constant_vanishes() {
        let g = std_normal(2);
        let s = g.sample(200, 1);
        let u = CylinderFunction::coordinate(0);
        let one = CylinderFunction::constant(1.0);
        let e = form_value(&u, &one, &g, 1.0, &s, None, &InnerRule::default()).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.stderr, 0.0);
        assert!(e.domain_extension);
    }

    #[test]
    fn one_mode_coordinate_form_at_alpha_one() {
        // (y - x)² / |y - x|² = 1, so the form is exactly one.
        let g = std_normal(1);
        let s = g.sample(50, 3);
        let u = CylinderFunction::coordinate(0);
        let e = form_value(&u, &u, &g, 1.0, &s, None, &InnerRule::default()).unwrap();
        assert!((e.value - 1.0).abs() < 2e-3, "{}", e.value);
    }

    #[test]
    fn form_rejects_bad_support_and_alpha() {
        let g = std_normal(2);
        let s = g.sample(10, 1);
        let u = CylinderFunction::coordinate(5);
        assert!(form_value(&u, &u, &g, 1.0, &s, None, &InnerRule::default()).is_err());
        let w = CylinderFunction::coordinate(0);
        assert!(form_value(&w, &w, &g, 2.0, &s, None, &InnerRule::default()).is_err());
    }
}
