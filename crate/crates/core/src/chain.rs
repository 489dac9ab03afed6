//! Metropolized coordinate-wise jump chain reversible for a coordinate
//! measure.
//!
//! A step picks a coordinate `i`, proposes `y = x_i + h` with `|h|/σ_i`
//! drawn from the density `∝ s^{-(1+α)}` on `[ε, R]` and a random sign, and
//! accepts with probability `min(1, ρ_i(y | x) / ρ_i(x_i | x))`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::free_field::FieldSamples;
use crate::nonlocal::CoordinateMeasure;
use crate::rng::{self, StreamRng};
use crate::stats::mean_stderr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Systematic,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpChainConfig {
    pub alpha: f64,
    /// Smallest jump in units of the coordinate's conditional scale.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Largest jump in the same units.
    #[serde(default = "default_cap")]
    pub cap: f64,
    pub sweeps: usize,
    #[serde(default)]
    pub schedule: Schedule,
    pub seed: u64,
    /// Record every `stride`-th sweep.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Accept every proposal. Breaks reversibility; used as a negative
    /// control.
    #[serde(default)]
    pub force_accept: bool,
}

fn default_eps() -> f64 {
    1e-3
}

fn default_cap() -> f64 {
    1e3
}

fn default_stride() -> usize {
    1
}

impl JumpChainConfig {
    pub fn new(alpha: f64, sweeps: usize, seed: u64) -> Self {
        Self {
            alpha,
            eps: default_eps(),
            cap: default_cap(),
            sweeps,
            schedule: Schedule::Systematic,
            seed,
            stride: 1,
            force_accept: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return config(format!("α = {} outside (0, 1]", self.alpha));
        }
        if !(self.eps > 0.0 && self.eps < self.cap && self.cap.is_finite()) {
            return config(format!("need 0 < ε < R, got ε = {}, R = {}", self.eps, self.cap));
        }
        if self.stride == 0 {
            return config("stride must be at least 1");
        }
        Ok(())
    }
}

/// Density of the signed scaled jump `h`: `|h|^{-(1+α)} / (2 Z)` on
/// `ε ≤ |h| ≤ R`, `Z = (ε^{-α} - R^{-α}) / α`.
pub fn proposal_density(alpha: f64, eps: f64, cap: f64, h: f64) -> f64 {
    let a = h.abs();
    if a < eps || a > cap {
        return 0.0;
    }
    let z = (eps.powf(-alpha) - cap.powf(-alpha)) / alpha;
    a.powf(-1.0 - alpha) / (2.0 * z)
}

/// Inverse-CDF draw of a signed scaled jump.
pub fn sample_jump(rng: &mut StreamRng, alpha: f64, eps: f64, cap: f64) -> f64 {
    let u: f64 = rng.random();
    let lo = eps.powf(-alpha);
    let hi = cap.powf(-alpha);
    let s = (lo - u * (lo - hi)).powf(-1.0 / alpha);
    if rng.random::<bool>() {
        s
    } else {
        -s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainStats {
    pub proposals: u64,
    pub accepted: u64,
    /// Smallest acceptance rate over windows of `ACCEPT_WINDOW` proposals.
    pub min_window_rate: f64,
    /// Some window accepted fewer than 1% of its proposals.
    pub low_acceptance: bool,
}

pub const ACCEPT_WINDOW: u64 = 1000;

impl ChainStats {
    fn new() -> Self {
        Self { proposals: 0, accepted: 0, min_window_rate: 1.0, low_acceptance: false }
    }

    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    fn merge(&mut self, other: &Self) {
        self.proposals += other.proposals;
        self.accepted += other.accepted;
        self.min_window_rate = self.min_window_rate.min(other.min_window_rate);
        self.low_acceptance |= other.low_acceptance;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub stride: usize,
    /// `(sweep, state)`; sweep 0 is the initial state.
    pub rows: Vec<(usize, Vec<f64>)>,
}

fn run<M: CoordinateMeasure + ?Sized>(
    measure: &M,
    cfg: &JumpChainConfig,
    x0: &[f64],
    stream_id: u64,
    mut record: Option<&mut Trajectory>,
) -> (Vec<f64>, ChainStats) {
    let k = measure.dim();
    let mut rng = rng::stream(cfg.seed, stream_id);
    let mut x = x0.to_vec();
    let mut stats = ChainStats::new();
    let mut window = (0u64, 0u64);
    let scales: Vec<f64> = (0..k).map(|i| measure.scale(i)).collect();
    if let Some(t) = record.as_deref_mut() {
        t.rows.push((0, x.clone()));
    }
    for sweep in 1..=cfg.sweeps {
        for pick in 0..k {
            let i = match cfg.schedule {
                Schedule::Systematic => pick,
                Schedule::UniformRandom => rng.random_range(0..k),
            };
            let y = x[i] + scales[i] * sample_jump(&mut rng, cfg.alpha, cfg.eps, cfg.cap);
            let accept = if cfg.force_accept {
                true
            } else {
                let log_a = measure.log_ratio(i, &x, y);
                let u: f64 = rng.random();
                log_a >= 0.0 || u < log_a.exp()
            };
            stats.proposals += 1;
            window.0 += 1;
            if accept {
                x[i] = y;
                stats.accepted += 1;
                window.1 += 1;
            }
            if window.0 == ACCEPT_WINDOW {
                let r = window.1 as f64 / window.0 as f64;
                stats.min_window_rate = stats.min_window_rate.min(r);
                stats.low_acceptance |= r < 0.01;
                window = (0, 0);
            }
        }
        if let Some(t) = record.as_deref_mut() {
            if sweep % cfg.stride == 0 {
                t.rows.push((sweep, x.clone()));
            }
        }
    }
    (x, stats)
}

/// Run one chain from `x0` on stream 0 of `cfg.seed`.
pub fn simulate_chain<M: CoordinateMeasure + ?Sized>(measure: &M, cfg: &JumpChainConfig, x0: &[f64]) -> Result<(Trajectory, ChainStats)> {
    cfg.validate()?;
    if x0.len() != measure.dim() {
        return Err(Error::DimensionMismatch(format!("x0 has {} coordinates, measure has {}", x0.len(), measure.dim())));
    }
    let mut traj = Trajectory { stride: cfg.stride, rows: Vec::new() };
    let (_, stats) = run(measure, cfg, x0, 0, Some(&mut traj));
    Ok((traj, stats))
}

/// Run one chain per row of `starts`, chain `c` on stream `c`, and return
/// the final states.
pub fn run_ensemble<M: CoordinateMeasure + ?Sized>(measure: &M, cfg: &JumpChainConfig, starts: &FieldSamples) -> Result<(FieldSamples, ChainStats)> {
    cfg.validate()?;
    if starts.dim != measure.dim() {
        return Err(Error::DimensionMismatch("start states and measure differ in dimension".into()));
    }
    let out: Vec<(Vec<f64>, ChainStats)> = (0..starts.len())
        .into_par_iter()
        .map(|c| run(measure, cfg, starts.row(c), c as u64, None))
        .collect();
    let mut stats = ChainStats::new();
    let mut data = Vec::with_capacity(starts.data.len());
    for (x, s) in &out {
        data.extend_from_slice(x);
        stats.merge(s);
    }
    Ok((FieldSamples { dim: starts.dim, data }, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Coordinate(usize),
    Square(usize),
    Product(usize, usize),
}

impl Observable {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Observable::Coordinate(i) => x[i],
            Observable::Square(i) => x[i] * x[i],
            Observable::Product(i, j) => x[i] * x[j],
        }
    }

    /// One-based names, `x1`, `x1^2`, `x1*x2`.
    pub fn name(&self) -> String {
        match *self {
            Observable::Coordinate(i) => format!("x{}", i + 1),
            Observable::Square(i) => format!("x{}^2", i + 1),
            Observable::Product(i, j) => format!("x{}*x{}", i + 1, j + 1),
        }
    }

    fn max_index(&self) -> usize {
        match *self {
            Observable::Coordinate(i) | Observable::Square(i) => i,
            Observable::Product(i, j) => i.max(j),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceRow {
    pub observable: String,
    pub start: f64,
    pub end: f64,
    pub stderr: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub rows: Vec<InvarianceRow>,
    pub chains: usize,
    pub sweeps: usize,
    pub acceptance_rate: f64,
    pub pass: bool,
}

pub const MIN_ENSEMBLE: usize = 100;

/// Moment drift of an ensemble of chains started from the measure itself.
/// The z-score of each observable uses the paired differences
/// `O(end) - O(start)` across chains.
pub fn invariance_report<M: CoordinateMeasure + ?Sized>(
    measure: &M,
    cfg: &JumpChainConfig,
    observables: &[Observable],
    starts: &FieldSamples,
) -> Result<InvarianceReport> {
    if starts.len() < MIN_ENSEMBLE {
        return config(format!("need at least {MIN_ENSEMBLE} chains, got {}", starts.len()));
    }
    if let Some(o) = observables.iter().find(|o| o.max_index() >= measure.dim()) {
        return config(format!("observable {} refers to a coordinate beyond the kept modes", o.name()));
    }
    let (ends, stats) = run_ensemble(measure, cfg, starts)?;
    let rows: Vec<InvarianceRow> = observables
        .iter()
        .map(|o| {
            let a: Vec<f64> = starts.rows().map(|x| o.eval(x)).collect();
            let b: Vec<f64> = ends.rows().map(|x| o.eval(x)).collect();
            let d: Vec<f64> = a.iter().zip(&b).map(|(s, e)| e - s).collect();
            let drift = mean_stderr(&d);
            let z = if drift.value == 0.0 { 0.0 } else { drift.value / drift.stderr };
            InvarianceRow {
                observable: o.name(),
                start: mean_stderr(&a).value,
                end: mean_stderr(&b).value,
                stderr: drift.stderr,
                z,
                pass: z.abs() < 4.0,
            }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(InvarianceReport { rows, chains: starts.len(), sweeps: cfg.sweeps, acceptance_rate: stats.rate(), pass })
}

/// Systematic resampling of `count` rows with probabilities proportional
/// to `weights`.
pub fn importance_resample(samples: &FieldSamples, weights: &[f64], count: usize, seed: u64) -> Result<FieldSamples> {
    if weights.len() != samples.len() {
        return Err(Error::DimensionMismatch("weights and samples differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return config("weights must be nonnegative with positive sum");
    }
    let mut rng = rng::stream(seed, 0);
    let offset: f64 = rng.random();
    let mut data = Vec::with_capacity(count * samples.dim);
    let mut cum = 0.0;
    let mut n = 0;
    for c in 0..count {
        let target = (c as f64 + offset) / count as f64 * total;
        while n + 1 < weights.len() && cum + weights[n] <= target {
            cum += weights[n];
            n += 1;
        }
        data.extend_from_slice(samples.row(n));
    }
    Ok(FieldSamples { dim: samples.dim, data })
}

/// Relative defect of `π(x) q(x→y) a(x→y) = π(y) q(y→x) a(y→x)` for a move
/// of coordinate `i` from `x_i` to `y`. With `tabulated`, the acceptance
/// ratio is read from the tabulated conditional instead of the exact one.
pub fn detailed_balance_residual<M: CoordinateMeasure + ?Sized>(
    measure: &M,
    cfg: &JumpChainConfig,
    i: usize,
    x: &[f64],
    y: f64,
    tabulated: bool,
) -> Result<f64> {
    let mut xy = x.to_vec();
    xy[i] = y;
    let s = measure.scale(i);
    let q = proposal_density(cfg.alpha, cfg.eps, cfg.cap, (y - x[i]) / s) / s;
    let q_back = proposal_density(cfg.alpha, cfg.eps, cfg.cap, (x[i] - y) / s) / s;
    let log_r = if tabulated {
        let cond = measure.conditional(i, x)?;
        cond.log_pdf(y) - cond.log_pdf(x[i])
    } else {
        measure.log_ratio(i, x, y)
    };
    let a = log_r.min(0.0).exp();
    let a_back = (-log_r).min(0.0).exp();
    let lx = measure.log_density(x);
    let ly = measure.log_density(&xy);
    let m = lx.max(ly);
    let lhs = (lx - m).exp() * q * a;
    let rhs = (ly - m).exp() * q_back * a_back;
    let scale = lhs.abs().max(rhs.abs());
    Ok(if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlocal::GaussianMeasure;
    use nalgebra::DMatrix;

    fn gauss2() -> GaussianMeasure {
        GaussianMeasure::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])).unwrap()
    }

    #[test]
    fn proposal_is_normalized_and_symmetric() {
        let (a, e, r) = (0.7, 1e-3, 1e3);
        let total = 2.0
            * crate::quadrature::adaptive_with_breaks(|t| proposal_density(a, e, r, t), &[e, 1e-2, 1e-1, 1.0, 10.0, 100.0, r], 1e-12, 1e-10).value;
        assert!((total - 1.0).abs() < 1e-8, "{total}");
        assert_eq!(proposal_density(a, e, r, 0.3), proposal_density(a, e, r, -0.3));
        assert_eq!(proposal_density(a, e, r, 1e-4), 0.0);
    }

    #[test]
    fn jumps_stay_in_range() {
        let mut rng = rng::stream(5, 0);
        for _ in 0..10_000 {
            let h = sample_jump(&mut rng, 1.0, 1e-3, 1e3).abs();
            assert!((1e-3..=1e3).contains(&h));
        }
    }

    #[test]
    fn zero_sweeps_keep_x0() {
        let g = gauss2();
        let (t, s) = simulate_chain(&g, &JumpChainConfig::new(1.0, 0, 1), &[0.5, -0.2]).unwrap();
        assert_eq!(t.rows, vec![(0, vec![0.5, -0.2])]);
        assert_eq!(s.proposals, 0);
    }

    #[test]
    fn chain_is_deterministic() {
        let g = gauss2();
        let cfg = JumpChainConfig { schedule: Schedule::UniformRandom, stride: 3, ..JumpChainConfig::new(0.5, 30, 9) };
        let a = simulate_chain(&g, &cfg, &[0.0, 0.0]).unwrap();
        let b = simulate_chain(&g, &cfg, &[0.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.rows.len(), 11);
    }

    #[test]
    fn config_validation() {
        assert!(JumpChainConfig::new(1.5, 1, 0).validate().is_err());
        let mut c = JumpChainConfig::new(1.0, 1, 0);
        c.eps = 2e3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn gaussian_detailed_balance_is_exact() {
        let g = gauss2();
        let cfg = JumpChainConfig::new(1.0, 1, 0);
        for (i, x, y) in [(0, [0.3, -0.4], 1.2), (1, [2.0, 0.1], -0.6), (0, [-1.0, 0.0], -0.9)] {
            assert!(detailed_balance_residual(&g, &cfg, i, &x, y, false).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_sweep_report_has_zero_drift() {
        let g = gauss2();
        let starts = g.sample(100, 4);
        let obs = [Observable::Coordinate(0), Observable::Square(0), Observable::Product(0, 1)];
        let r = invariance_report(&g, &JumpChainConfig::new(1.0, 0, 2), &obs, &starts).unwrap();
        assert!(r.rows.iter().all(|row| row.z == 0.0 && row.pass));
        assert!(invariance_report(&g, &JumpChainConfig::new(1.0, 0, 2), &obs, &g.sample(99, 4)).is_err());
    }

    #[test]
    fn resampling_follows_weights() {
        let s = FieldSamples::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]);
        let r = importance_resample(&s, &[0.0, 3.0, 1.0], 400, 1).unwrap();
        let ones = r.rows().filter(|x| x[0] == 1.0).count();
        assert_eq!(ones, 300);
        assert!(r.rows().all(|x| x[0] != 0.0));
    }
}
