//! Small Monte-Carlo statistics helpers.

use serde::{Deserialize, Serialize};

/// A Monte-Carlo estimate with its plug-in standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    /// Number of standard errors separating the estimate from `target`.
    /// Returns 0 when both coincide and the error is zero.
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = self.value - target;
        if diff == 0.0 {
            0.0
        } else if self.stderr == 0.0 {
            f64::INFINITY
        } else {
            diff / self.stderr
        }
    }

    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        self.z_score(target).abs() <= sigmas
    }
}

/// Pairwise summation, deterministic for a given slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean with standard error `s / sqrt(n)`.
pub fn mean_stderr(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return Estimate { value: m, stderr: 0.0 };
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    Estimate {
        value: m,
        stderr: (var / n as f64).sqrt(),
    }
}

/// Ratio estimator `sum(w f) / sum(w)` with delta-method standard error.
pub fn ratio_estimate(weights: &[f64], values: &[f64]) -> Estimate {
    assert_eq!(weights.len(), values.len());
    let n = weights.len();
    let wf: Vec<f64> = weights.iter().zip(values).map(|(w, f)| w * f).collect();
    let sw = pairwise_sum(weights);
    let r = pairwise_sum(&wf) / sw;
    if n < 2 {
        return Estimate { value: r, stderr: 0.0 };
    }
    let wbar = sw / n as f64;
    let resid: Vec<f64> = weights
        .iter()
        .zip(values)
        .map(|(w, f)| {
            let e = w * (f - r);
            e * e
        })
        .collect();
    let var = pairwise_sum(&resid) / (n - 1) as f64;
    Estimate {
        value: r,
        stderr: (var / n as f64).sqrt() / wbar,
    }
}

/// Kish effective sample size of a weight vector.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s = pairwise_sum(weights);
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    let s2 = pairwise_sum(&sq);
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Batch-means standard error for a correlated series.
pub fn batch_means(xs: &[f64], n_batches: usize) -> Estimate {
    let n_batches = n_batches.max(2).min(xs.len().max(2));
    let len = xs.len() / n_batches;
    if len == 0 {
        return mean_stderr(xs);
    }
    let means: Vec<f64> = (0..n_batches)
        .map(|b| mean(&xs[b * len..(b + 1) * len]))
        .collect();
    let overall = mean(&xs[..n_batches * len]);
    let se = mean_stderr(&means).stderr;
    Estimate {
        value: overall,
        stderr: se,
    }
}
