use std::sync::Arc;

use serde::{Deserialize, Serialize};

use nlsq_core::chain::{Observable, Schedule};
use nlsq_core::free_field::{build_covariance, FreeFieldModel};
use nlsq_core::interactions::{cutoff, default_cutoff, CutoffShape, PotentialKind, PotentialSpec};
use nlsq_core::local_limit::{GaussianBump, GaussianDensity, Window};
use nlsq_core::nonlocal::CylinderSpec;
use nlsq_core::particles::Particle;
use nlsq_core::spectral::{EigenSystem, GridSpec, OperatorKind, OperatorSpec};
use nlsq_core::Result;

/// Grid and truncation shared by the field subcommands.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub d: usize,
    #[serde(rename = "L")]
    pub half_width: f64,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "one")]
    pub m0: f64,
}

fn one() -> f64 {
    1.0
}

impl BaseConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.d, self.half_width, self.n)
    }

    pub fn eigensystem(&self, kind: OperatorKind) -> Result<EigenSystem> {
        let spec = OperatorSpec { kind, dim: self.d, mass: self.m0 };
        EigenSystem::compute(&self.grid()?, &spec, self.k)
    }

    pub fn free_model(&self) -> Result<Arc<FreeFieldModel>> {
        let es = Arc::new(self.eigensystem(OperatorKind::H)?);
        Ok(Arc::new(build_covariance(es, self.m0)?))
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorChoice {
    #[default]
    H,
    HTilde,
}

impl OperatorChoice {
    pub fn kind(self) -> OperatorKind {
        match self {
            OperatorChoice::H => OperatorKind::H,
            OperatorChoice::HTilde => OperatorKind::HTilde,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub base: BaseConfig,
    #[serde(default)]
    pub operator: OperatorChoice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFieldConfig {
    pub base: BaseConfig,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharfunConfig {
    pub base: BaseConfig,
    pub samples: usize,
    /// Explicit coefficient vectors; random ones are drawn when empty.
    #[serde(default)]
    pub test_functions: Vec<Vec<f64>>,
    #[serde(default = "default_random_functions")]
    pub random_functions: usize,
    /// Ray `t ϕ` scanned for the first test function.
    #[serde(default = "default_ts")]
    pub ts: Vec<f64>,
}

fn default_random_functions() -> usize {
    20
}

fn default_ts() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.25).collect()
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffConfig {
    #[serde(default)]
    pub shape: CutoffShape,
    pub radius: Option<f64>,
}

/// Interacting model: `{kind, a0, lambda, n, g, base}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: PotentialKind,
    #[serde(default)]
    pub a0: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one_u32")]
    pub n: u32,
    #[serde(default)]
    pub g: CutoffConfig,
    #[serde(default)]
    pub allow_large_charge: bool,
}

fn one_u32() -> u32 {
    1
}

impl ModelConfig {
    pub fn potential(&self, grid: &GridSpec) -> Result<PotentialSpec> {
        let g = match self.g.radius {
            Some(r) => cutoff(grid, self.g.shape, r)?,
            None if self.g.shape == CutoffShape::Bump => default_cutoff(grid),
            None => cutoff(grid, self.g.shape, 0.5 * grid.half_width)?,
        };
        let mut spec = match self.kind {
            PotentialKind::Free => PotentialSpec::free(g),
            PotentialKind::Exp => PotentialSpec::exp(self.a0, g),
            PotentialKind::Poly => PotentialSpec::poly(self.n, self.lambda, g),
            k => PotentialSpec::trig(k, self.a0, self.lambda, g),
        };
        spec.allow_large_charge = self.allow_large_charge;
        spec.validate(grid.len())?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsConfig {
    pub kind: PotentialKind,
    #[serde(default)]
    pub a0: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one_u32")]
    pub n: u32,
    #[serde(default)]
    pub g: CutoffConfig,
    #[serde(default)]
    pub allow_large_charge: bool,
    pub base: BaseConfig,
    pub samples: usize,
    /// Values of `|||ϕ|||` for the continuity bound.
    #[serde(default = "default_r")]
    pub r: Vec<f64>,
}

fn default_r() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}

impl GibbsConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            a0: self.a0,
            lambda: self.lambda,
            n: self.n,
            g: self.g,
            allow_large_charge: self.allow_large_charge,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormEvalConfig {
    pub base: BaseConfig,
    pub alpha: f64,
    pub samples: usize,
    pub u: CylinderSpec,
    pub v: CylinderSpec,
    /// Gibbs reweighting of the free field; free field when absent.
    pub model: Option<ModelConfig>,
    /// Also report the form at the unit contractions of `u` and `v`.
    #[serde(default)]
    pub contraction: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub base: BaseConfig,
    pub alpha: f64,
    #[serde(alias = "steps")]
    pub sweeps: usize,
    #[serde(default = "eps")]
    pub eps: f64,
    #[serde(default = "cap")]
    pub cap: f64,
    #[serde(default = "stride")]
    pub stride: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub force_accept: bool,
    /// Start of the recorded trajectory; the origin when absent.
    pub x0: Option<Vec<f64>>,
    /// Ensemble size for the invariance report; none when 0.
    #[serde(default)]
    pub chains: usize,
    #[serde(default)]
    pub observables: Vec<Observable>,
    pub model: Option<ModelConfig>,
    /// Free-field samples resampled into Gibbs start states.
    #[serde(default = "pool")]
    pub pool: usize,
}

fn eps() -> f64 {
    1e-3
}

fn cap() -> f64 {
    1e3
}

fn stride() -> usize {
    1
}

fn pool() -> usize {
    20_000
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Example0,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConditionsConfig {
    pub base: BaseConfig,
    pub alpha: f64,
    #[serde(default)]
    pub preset: Preset,
    /// Threshold `M₀` of the tail condition.
    #[serde(default = "one", rename = "M0")]
    pub threshold: f64,
    pub samples: usize,
    #[serde(rename = "M")]
    pub m_list: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonConfig {
    pub intensity: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticlesConfig {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: u64,
    /// Window half-width `W` of the configurations.
    pub window: f64,
    /// Grid of `H̃`; needs `L ≥ W`.
    #[serde(rename = "L")]
    pub half_width: f64,
    #[serde(rename = "grid_n")]
    pub grid_points: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default)]
    pub points: Vec<Particle>,
    pub poisson: Option<PoissonConfig>,
    pub gamma: Option<f64>,
    #[serde(default)]
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalLimitConfig {
    pub alphas: Vec<f64>,
    #[serde(default = "both_windows")]
    pub windows: Vec<Window>,
    pub f: GaussianBump,
    pub g: GaussianBump,
    #[serde(default = "std_normal")]
    pub rho: GaussianDensity,
}

fn both_windows() -> Vec<Window> {
    vec![Window::Global, Window::Local]
}

fn std_normal() -> GaussianDensity {
    GaussianDensity { mean: 0.0, sd: 1.0 }
}
