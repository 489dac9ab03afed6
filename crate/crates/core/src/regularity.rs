//! Numerical checks of the sufficient conditions for quasi-regularity at
//! truncation.

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{config, Error, Result};
use crate::free_field::FieldSamples;
use crate::stats::Estimate;

/// Weights `β_i`, sequence `γ_i`, threshold `M₀` and index `α`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionInput {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub m0: f64,
}

impl ConditionInput {
    pub fn new(alpha: f64, beta: Vec<f64>, gamma: Vec<f64>, m0: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return config(format!("α = {alpha} outside (0, 1]"));
        }
        if beta.len() != gamma.len() {
            return Err(Error::DimensionMismatch("β and γ differ in length".into()));
        }
        if beta.iter().chain(&gamma).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return config("β and γ must be positive and finite");
        }
        if !(m0 > 0.0) {
            return config("M₀ must be positive");
        }
        Ok(Self { alpha, beta, gamma, m0 })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `(β_i γ_i)^{(1+α)/2}`.
    pub fn term_weights(&self) -> Vec<f64> {
        let e = 0.5 * (1.0 + self.alpha);
        self.beta.iter().zip(&self.gamma).map(|(b, g)| (b * g).powf(e)).collect()
    }

    /// `M₀ / sqrt(β_i γ_i)`: the level `|X_i|` must exceed in the tail event.
    pub fn thresholds(&self) -> Vec<f64> {
        self.beta.iter().zip(&self.gamma).map(|(b, g)| self.m0 / (b * g).sqrt()).collect()
    }

    /// Partial sums of `γ_i^{-1}`.
    pub fn gamma_inverse_partial_sums(&self) -> Vec<f64> {
        partial_sums(&self.gamma.iter().map(|g| 1.0 / g).collect::<Vec<_>>())
    }
}

/// `β = λ⁴` for `α = 1` and `β = λ⁶` for `α < 1`; `γ = λ⁻²` throughout.
pub fn preset_example0(lambda: &[f64], alpha: f64, m0: f64) -> Result<ConditionInput> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return config(format!("α = {alpha} outside (0, 1]"));
    }
    let p = if alpha == 1.0 { 4 } else { 6 };
    let beta = lambda.iter().map(|l| l.powi(p)).collect();
    let gamma = lambda.iter().map(|l| l.powi(-2)).collect();
    ConditionInput::new(alpha, beta, gamma, m0)
}

/// Source of `μ(|X_i| > t)`.
#[derive(Debug, Clone, Copy)]
pub enum TailProvider<'a> {
    /// Centered Gaussian coordinates with the given variances.
    Gaussian(&'a [f64]),
    Empirical(&'a FieldSamples),
    /// Every probability replaced by its upper bound 1.
    Unit,
}

pub fn gaussian_tail(variance: f64, t: f64) -> f64 {
    if variance <= 0.0 {
        return if t < 0.0 { 1.0 } else { 0.0 };
    }
    erfc(t / (2.0 * variance).sqrt())
}

pub fn empirical_tail(samples: &FieldSamples, i: usize, t: f64) -> Estimate {
    let n = samples.len() as f64;
    let p = samples.rows().filter(|x| x[i].abs() > t).count() as f64 / n;
    Estimate { value: p, stderr: (p * (1.0 - p) / n).sqrt() }
}

impl TailProvider<'_> {
    pub fn tail(&self, i: usize, t: f64) -> f64 {
        match self {
            TailProvider::Gaussian(v) => gaussian_tail(v[i], t),
            TailProvider::Empirical(s) => empirical_tail(s, i, t).value,
            TailProvider::Unit => 1.0,
        }
    }
}

fn partial_sums(terms: &[f64]) -> Vec<f64> {
    terms
        .iter()
        .scan(0.0, |acc, t| {
            *acc += t;
            Some(*acc)
        })
        .collect()
}

/// Number of trailing terms whose total decides convergence: `⌈K/10⌉`.
pub fn last_decade(k: usize) -> usize {
    k.div_ceil(10)
}

pub const CONVERGENCE_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Condition11Report {
    pub terms: Vec<f64>,
    pub partial_sums: Vec<f64>,
    /// `S_K - S_{K - ⌈K/10⌉}`.
    pub last_decade_increment: f64,
    pub converged: bool,
}

/// Partial sums of `Σ (β_i γ_i)^{(1+α)/2} μ(β_i^{1/2} |X_i| > M₀ γ_i^{-1/2})`.
pub fn check_condition_1_11(ci: &ConditionInput, tails: TailProvider<'_>) -> Result<Condition11Report> {
    if ci.is_empty() {
        return config("no modes");
    }
    if let TailProvider::Gaussian(v) = tails {
        if v.len() < ci.len() {
            return Err(Error::DimensionMismatch("fewer variances than modes".into()));
        }
    }
    if let TailProvider::Empirical(s) = tails {
        if s.dim < ci.len() {
            return Err(Error::DimensionMismatch("samples have fewer coordinates than modes".into()));
        }
    }
    let thresholds = ci.thresholds();
    let terms: Vec<f64> = ci.term_weights().iter().enumerate().map(|(i, w)| w * tails.tail(i, thresholds[i])).collect();
    let partial_sums = partial_sums(&terms);
    let k = terms.len();
    let total = partial_sums[k - 1];
    let tail_from = k - last_decade(k);
    let inc = total - if tail_from == 0 { 0.0 } else { partial_sums[tail_from - 1] };
    Ok(Condition11Report {
        terms,
        last_decade_increment: inc,
        converged: inc <= CONVERGENCE_RTOL * total,
        partial_sums,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MScanRow {
    #[serde(rename = "M")]
    pub m: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Condition12Report {
    pub scan: Vec<MScanRow>,
    /// Smallest `M` for which every sample qualifies.
    pub critical_m: f64,
    pub max_fraction: f64,
    /// Some listed `M` reaches fraction 1.
    pub pass: bool,
}

/// Fraction of samples with `|X_i| ≤ M β_i^{-1/2} γ_i^{-1/2}` for all `i`.
pub fn check_condition_1_12(ci: &ConditionInput, samples: &FieldSamples, m_list: &[f64]) -> Result<Condition12Report> {
    if samples.is_empty() {
        return config("no samples");
    }
    if samples.dim < ci.len() {
        return Err(Error::DimensionMismatch("samples have fewer coordinates than modes".into()));
    }
    let scale: Vec<f64> = ci.beta.iter().zip(&ci.gamma).map(|(b, g)| (b * g).sqrt()).collect();
    // the smallest M admitting each sample
    let needed: Vec<f64> = samples
        .rows()
        .map(|x| scale.iter().enumerate().map(|(i, s)| x[i].abs() * s).fold(0.0, f64::max))
        .collect();
    let n = needed.len() as f64;
    let scan: Vec<MScanRow> = m_list
        .iter()
        .map(|&m| MScanRow { m, fraction: needed.iter().filter(|&&v| v <= m).count() as f64 / n })
        .collect();
    let max_fraction = scan.iter().map(|r| r.fraction).fold(0.0, f64::max);
    Ok(Condition12Report {
        critical_m: needed.iter().copied().fold(0.0, f64::max),
        max_fraction,
        pass: max_fraction == 1.0,
        scan,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummabilityIdentity {
    pub sum_beta_gamma: f64,
    pub sum_lambda_squared: f64,
    pub abs_diff: f64,
}

/// `Σ β_i γ_i` against `Σ λ_i²` for the `α = 1` preset.
pub fn summability_identity(ci: &ConditionInput, lambda: &[f64]) -> SummabilityIdentity {
    let a: f64 = ci.beta.iter().zip(&ci.gamma).map(|(b, g)| b * g).sum();
    let b: f64 = lambda.iter().map(|l| l * l).sum();
    SummabilityIdentity { sum_beta_gamma: a, sum_lambda_squared: b, abs_diff: (a - b).abs() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    pub alpha: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub partial_sums: Vec<f64>,
    pub converged: bool,
    #[serde(rename = "M_scan")]
    pub m_scan: Vec<MScanRow>,
    pub identity: Option<SummabilityIdentity>,
    pub gamma_inverse_sum: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_arithmetic() {
        let ci = preset_example0(&[1.0, 0.5], 1.0, 1.0).unwrap();
        assert_eq!(ci.beta, vec![1.0, 1.0 / 16.0]);
        assert_eq!(ci.gamma, vec![1.0, 4.0]);
        let half = preset_example0(&[1.0, 0.5, 0.25], 0.5, 1.0).unwrap();
        for (w, l) in half.term_weights().iter().zip([1.0f64, 0.5, 0.25]) {
            assert!((w - l.powi(3)).abs() < 1e-15);
        }
        assert!(preset_example0(&[1.0], 1.5, 1.0).is_err());
        assert!(preset_example0(&[1.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn geometric_series_with_unit_tails() {
        // β_i γ_i = 4^{-i}
        let beta: Vec<f64> = (1..=10).map(|i| 4f64.powi(-i)).collect();
        let ci = ConditionInput::new(1.0, beta, vec![1.0; 10], 1.0).unwrap();
        let r = check_condition_1_11(&ci, TailProvider::Unit).unwrap();
        assert!((r.partial_sums[9] - 1.0 / 3.0).abs() < 1e-5);
        assert!(r.partial_sums.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn identity_for_alpha_one() {
        let lambda = [1.0, 0.6, 0.3, 0.1];
        let ci = preset_example0(&lambda, 1.0, 1.0).unwrap();
        let id = summability_identity(&ci, &lambda);
        assert!(id.abs_diff < 1e-15);
        let unit = check_condition_1_11(&ci, TailProvider::Unit).unwrap();
        assert!((unit.partial_sums[3] - id.sum_beta_gamma).abs() < 1e-15);
    }

    #[test]
    fn m_scan_is_nested() {
        let s = FieldSamples::from_rows(&[vec![0.5, -2.0], vec![3.0, 0.1], vec![-0.2, 0.2]]);
        let ci = ConditionInput::new(1.0, vec![1.0, 1.0], vec![1.0, 1.0], 1.0).unwrap();
        let r = check_condition_1_12(&ci, &s, &[0.1, 1.0, 2.5, 1e9]).unwrap();
        let f: Vec<f64> = r.scan.iter().map(|x| x.fraction).collect();
        assert_eq!(f, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(r.critical_m, 3.0);
        assert!(r.pass);
    }

    #[test]
    fn gaussian_tail_values() {
        assert!((gaussian_tail(1.0, 0.0) - 1.0).abs() < 1e-15);
        let p = gaussian_tail(1.0, 1.959_963_984_540_054);
        assert!((p - 0.05).abs() < 1e-10, "{p}");
        assert!((gaussian_tail(4.0, 2.0) - gaussian_tail(1.0, 1.0)).abs() < 1e-15);
    }
}
