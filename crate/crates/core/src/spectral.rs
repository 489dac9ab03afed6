//! Discretized pseudo-differential operators and their eigensystems.
//!
//! The operators have the sandwich form `M^p (-Δ + m²)^q M^p` with
//! `M = |x|² + 1`. On a periodic grid over `[-L, L]^d` the multiplication
//! factor is diagonal and the Laplacian factor is diagonal in the discrete
//! Fourier basis, so both are realized exactly on the grid.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};

/// Largest number of grid points accepted unless a caller raises the budget.
pub const DEFAULT_GRID_BUDGET: usize = 4096;

/// Relative tolerance used when grouping numerically tied eigenvalues.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub half_width: f64,
    pub points_per_axis: usize,
}

impl GridSpec {
    pub fn new(dim: usize, half_width: f64, points_per_axis: usize) -> Result<Self> {
        Self::with_budget(dim, half_width, points_per_axis, DEFAULT_GRID_BUDGET)
    }

    pub fn with_budget(dim: usize, half_width: f64, points_per_axis: usize, budget: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return config(format!("dimension must be 1 or 2, got {dim}"));
        }
        if !(half_width > 0.0) || !half_width.is_finite() {
            return config(format!("half-width must be positive, got {half_width}"));
        }
        if points_per_axis < 8 {
            return config(format!("need at least 8 points per axis, got {points_per_axis}"));
        }
        if points_per_axis % 2 != 0 {
            return config(format!(
                "points per axis must be even for the Fourier factor, got {points_per_axis}"
            ));
        }
        let g = Self { dim, half_width, points_per_axis };
        if g.len() > budget {
            return Err(Error::Resource(format!(
                "grid has {} points, budget is {budget}",
                g.len()
            )));
        }
        Ok(g)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.points_per_axis as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axis(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.points_per_axis)
            .map(|j| -self.half_width + j as f64 * h)
            .collect()
    }

    /// Coordinates of grid point `idx` (row-major over axes).
    pub fn point(&self, idx: usize) -> [f64; 2] {
        let n = self.points_per_axis;
        let h = self.spacing();
        match self.dim {
            1 => [-self.half_width + idx as f64 * h, 0.0],
            _ => [
                -self.half_width + (idx / n) as f64 * h,
                -self.half_width + (idx % n) as f64 * h,
            ],
        }
    }

    pub fn norm_sq_at(&self, idx: usize) -> f64 {
        let p = self.point(idx);
        p[0] * p[0] + p[1] * p[1]
    }

    /// Angular frequencies of the discrete Fourier modes along one axis, in
    /// FFT order (0, 1, ..., n/2 - 1, -n/2, ..., -1).
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.points_per_axis as i64;
        (0..n)
            .map(|k| {
                let m = if k < n / 2 { k } else { k - n };
                PI * m as f64 / self.half_width
            })
            .collect()
    }

    /// Grid L² inner product.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * self.cell_volume()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// Exponent (d+1)/2 on both the multiplication and the Laplacian factor.
    H,
    /// Exponent d+1 on the multiplication factors, (d+1)/2 on the Laplacian.
    HTilde,
    /// Arbitrary exponents, mainly for tests.
    Custom { multiplier_exponent: f64, symbol_exponent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    pub dim: usize,
    #[serde(default = "default_mass")]
    pub mass: f64,
}

fn default_mass() -> f64 {
    1.0
}

impl OperatorSpec {
    pub fn h(dim: usize) -> Self {
        Self { kind: OperatorKind::H, dim, mass: 1.0 }
    }

    pub fn h_tilde(dim: usize) -> Self {
        Self { kind: OperatorKind::HTilde, dim, mass: 1.0 }
    }

    pub fn custom(dim: usize, multiplier_exponent: f64, symbol_exponent: f64) -> Self {
        Self {
            kind: OperatorKind::Custom { multiplier_exponent, symbol_exponent },
            dim,
            mass: 1.0,
        }
    }

    /// `(p, q)`: exponent of `|x|²+1` on each side and of `|ξ|²+m²`.
    pub fn exponents(&self) -> (f64, f64) {
        let d = self.dim as f64;
        match self.kind {
            OperatorKind::H => ((d + 1.0) / 2.0, (d + 1.0) / 2.0),
            OperatorKind::HTilde => (d + 1.0, (d + 1.0) / 2.0),
            OperatorKind::Custom { multiplier_exponent, symbol_exponent } => {
                (multiplier_exponent, symbol_exponent)
            }
        }
    }
}

/// Kernel table of a Fourier multiplier with an even symbol: entry `[a*n + b]`
/// (or `[a]` in one dimension) is the matrix entry between grid points whose
/// index offsets are `(a, b)` modulo `n`.
fn multiplier_kernel(grid: &GridSpec, symbol: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = grid.points_per_axis;
    let xi = grid.frequencies();
    let cos_tab: Vec<f64> = (0..n * n)
        .map(|t| {
            let (m, a) = (t / n, t % n);
            (2.0 * PI * ((m * a) % n) as f64 / n as f64).cos()
        })
        .collect();
    match grid.dim {
        1 => (0..n)
            .map(|a| (0..n).map(|m| symbol(xi[m] * xi[m]) * cos_tab[m * n + a]).sum::<f64>() / n as f64)
            .collect(),
        _ => {
            // partial transform along the second axis first
            let mut partial = vec![0.0; n * n];
            for m1 in 0..n {
                for b in 0..n {
                    partial[m1 * n + b] = (0..n)
                        .map(|m2| symbol(xi[m1] * xi[m1] + xi[m2] * xi[m2]) * cos_tab[m2 * n + b])
                        .sum();
                }
            }
            let norm = (n * n) as f64;
            let mut kernel = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    kernel[a * n + b] =
                        (0..n).map(|m1| cos_tab[m1 * n + a] * partial[m1 * n + b]).sum::<f64>() / norm;
                }
            }
            kernel
        }
    }
}

/// Dense matrix of the Fourier multiplier with symbol `s(|ξ|²)`.
pub fn fourier_multiplier_matrix(grid: &GridSpec, symbol: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = grid.points_per_axis;
    let size = grid.len();
    let kernel = multiplier_kernel(grid, symbol);
    match grid.dim {
        1 => DMatrix::from_fn(size, size, |j, k| kernel[(j + n - k) % n]),
        _ => DMatrix::from_fn(size, size, |j, k| {
            let a = (j / n + n - k / n) % n;
            let b = (j % n + n - k % n) % n;
            kernel[a * n + b]
        }),
    }
}

fn check_dims(grid: &GridSpec, spec: &OperatorSpec) -> Result<()> {
    if grid.dim != spec.dim {
        return Err(Error::DimensionMismatch(format!(
            "grid has dimension {}, operator {}",
            grid.dim, spec.dim
        )));
    }
    if grid.points_per_axis % 2 != 0 {
        return config("points per axis must be even");
    }
    if !(spec.mass > 0.0) {
        return config(format!("mass must be positive, got {}", spec.mass));
    }
    Ok(())
}

fn sandwich(grid: &GridSpec, sign: f64, spec: &OperatorSpec) -> DMatrix<f64> {
    let (p, q) = spec.exponents();
    let m2 = spec.mass * spec.mass;
    let mut a = fourier_multiplier_matrix(grid, |k2| (k2 + m2).powf(sign * q));
    let diag: Vec<f64> = (0..grid.len())
        .map(|i| (grid.norm_sq_at(i) + 1.0).powf(sign * p))
        .collect();
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            a[(i, j)] *= diag[i] * diag[j];
        }
    }
    symmetrize(&mut a);
    a
}

pub(crate) fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
}

/// Matrix of the discretized operator in the grid-point basis.
pub fn build_operator_matrix(grid: &GridSpec, spec: &OperatorSpec) -> Result<DMatrix<f64>> {
    check_dims(grid, spec)?;
    Ok(sandwich(grid, 1.0, spec))
}

/// Matrix of the inverse operator, assembled factor by factor with negated
/// exponents. In exact arithmetic this is the matrix inverse of
/// [`build_operator_matrix`]; numerically it avoids inverting an
/// ill-conditioned matrix.
pub fn build_inverse_operator_matrix(grid: &GridSpec, spec: &OperatorSpec) -> Result<DMatrix<f64>> {
    check_dims(grid, spec)?;
    Ok(sandwich(grid, -1.0, spec))
}

/// Eigenpairs of the inverse operator, normalized so the top eigenvalue is 1.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    /// Normalized eigenvalues, nonincreasing, `lambda[0] == 1`.
    pub lambda: Vec<f64>,
    /// Columns are grid functions, orthonormal in the grid inner product.
    pub basis: DMatrix<f64>,
    /// Raw top eigenvalue of the inverse operator; `lambda = raw / scale`.
    pub scale: f64,
    pub cell_volume: f64,
    pub grid: Option<GridSpec>,
    pub operator: Option<OperatorSpec>,
}

impl EigenSystem {
    pub fn count(&self) -> usize {
        self.lambda.len()
    }

    /// Build `H^{-1}` on the grid and keep its top `keep` modes.
    pub fn compute(grid: &GridSpec, spec: &OperatorSpec, keep: usize) -> Result<Self> {
        let inv = build_inverse_operator_matrix(grid, spec)?;
        let mut es = eigendecompose_inverse(inv, keep)?;
        es.attach_grid(*grid);
        es.operator = Some(*spec);
        Ok(es)
    }

    /// Assemble an eigensystem from explicit parts. The basis columns must be
    /// grid-orthonormal; `lambda` is used as given.
    pub fn from_parts(grid: GridSpec, lambda: Vec<f64>, basis: DMatrix<f64>) -> Result<Self> {
        if basis.nrows() != grid.len() || basis.ncols() != lambda.len() {
            return Err(Error::DimensionMismatch(format!(
                "basis is {}x{}, expected {}x{}",
                basis.nrows(),
                basis.ncols(),
                grid.len(),
                lambda.len()
            )));
        }
        Ok(Self {
            lambda,
            basis,
            scale: 1.0,
            cell_volume: grid.cell_volume(),
            grid: Some(grid),
            operator: None,
        })
    }

    fn attach_grid(&mut self, grid: GridSpec) {
        let cv = grid.cell_volume();
        self.basis /= cv.sqrt();
        self.cell_volume = cv;
        self.grid = Some(grid);
    }

    pub fn mode(&self, i: usize) -> Vec<f64> {
        self.basis.column(i).iter().copied().collect()
    }

    /// Gram matrix of the basis in the grid inner product.
    pub fn gram(&self) -> DMatrix<f64> {
        self.basis.transpose() * &self.basis * self.cell_volume
    }

    /// Keep only the leading `k` modes.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.count());
        Self {
            lambda: self.lambda[..k].to_vec(),
            basis: self.basis.columns(0, k).into_owned(),
            ..self.clone()
        }
    }

    /// Field values on the grid for coefficient vector `x` (`Σ x_i φ_i`).
    pub fn synthesize(&self, x: &[f64]) -> Vec<f64> {
        let k = x.len().min(self.count());
        let v = self.basis.columns(0, k) * DVector::from_column_slice(&x[..k]);
        v.iter().copied().collect()
    }

    /// Coefficients `(f, φ_i)` of a grid function.
    pub fn project(&self, f: &[f64]) -> Vec<f64> {
        let fv = DVector::from_column_slice(f);
        (self.basis.transpose() * fv * self.cell_volume).iter().copied().collect()
    }
}

/// Eigendecomposition of an operator matrix `A` (symmetric positive
/// definite): returns the eigenvalues of `A^{-1}` sorted decreasing and
/// normalized by the largest, with Euclidean-orthonormal eigenvectors.
pub fn eigendecompose(matrix: DMatrix<f64>, keep: usize) -> Result<EigenSystem> {
    let n = matrix.nrows();
    if keep == 0 || keep > n {
        return config(format!("cannot keep {keep} modes of a {n}x{n} matrix"));
    }
    let mut a = matrix;
    symmetrize(&mut a);
    let eig = SymmetricEigen::new(a);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::Indefinite(min));
    }
    let inv: Vec<f64> = eig.eigenvalues.iter().map(|v| 1.0 / v).collect();
    Ok(assemble(inv, eig.eigenvectors, keep))
}

/// Same as [`eigendecompose`] but the input already is the inverse operator.
pub fn eigendecompose_inverse(matrix: DMatrix<f64>, keep: usize) -> Result<EigenSystem> {
    let n = matrix.nrows();
    if keep == 0 || keep > n {
        return config(format!("cannot keep {keep} modes of a {n}x{n} matrix"));
    }
    let mut a = matrix;
    symmetrize(&mut a);
    let eig = SymmetricEigen::new(a);
    let vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    // Round-off may push the smallest eigenvalues of a compact inverse
    // slightly below zero; anything beyond that is a real indefiniteness.
    if !(max > 0.0) || min < -1e-10 * max {
        return Err(Error::Indefinite(min));
    }
    let es = assemble(vals, eig.eigenvectors, keep);
    if let Some(&last) = es.lambda.last() {
        if !(last > 0.0) {
            return Err(Error::Indefinite(last * es.scale));
        }
    }
    Ok(es)
}

fn assemble(values: Vec<f64>, vectors: DMatrix<f64>, keep: usize) -> EigenSystem {
    let n = values.len();
    let argmax: Vec<usize> = (0..n)
        .map(|j| {
            let col = vectors.column(j);
            (0..col.len())
                .fold((0, -1.0), |acc, i| if col[i].abs() > acc.1 { (i, col[i].abs()) } else { acc })
                .0
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    // within groups of tied eigenvalues, order by the position of the
    // largest grid component
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n
            && (values[order[start]] - values[order[end]]).abs() <= TIE_TOL * values[order[start]].abs()
        {
            end += 1;
        }
        order[start..end].sort_by_key(|&j| argmax[j]);
        start = end;
    }
    let kept = &order[..keep];
    let scale = values[order[0]];
    let lambda: Vec<f64> = kept.iter().map(|&j| values[j] / scale).collect();
    let mut basis = DMatrix::zeros(vectors.nrows(), keep);
    for (c, &j) in kept.iter().enumerate() {
        let sign = if vectors[(argmax[j], j)] < 0.0 { -1.0 } else { 1.0 };
        basis.set_column(c, &(vectors.column(j) * sign));
    }
    EigenSystem {
        lambda,
        basis,
        scale,
        cell_volume: 1.0,
        grid: None,
        operator: None,
    }
}

/// A point of a truncated weighted sequence space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateVector {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl CoordinateVector {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values vs {} weights",
                values.len(),
                weights.len()
            )));
        }
        Ok(Self { values, weights })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `(Σ β_i x_i²)^{1/2}`.
pub fn weighted_norm(x: &CoordinateVector) -> Result<f64> {
    if let Some(b) = x.weights.iter().find(|b| !(**b > 0.0)) {
        return domain(format!("weights must be positive, found {b}"));
    }
    Ok(x.values
        .iter()
        .zip(&x.weights)
        .map(|(v, b)| b * v * v)
        .sum::<f64>()
        .sqrt())
}

pub const MAX_SCALE_INDEX: i32 = 3;

/// The isometry between the Sobolev-type space of index `m` and the weighted
/// sequence space with weights `λ_i^{-2m}`.
#[derive(Debug, Clone, Copy)]
pub struct IsometryMap<'a> {
    pub m: i32,
    pub es: &'a EigenSystem,
}

impl<'a> IsometryMap<'a> {
    pub fn new(m: i32, es: &'a EigenSystem) -> Result<Self> {
        if m.abs() > MAX_SCALE_INDEX {
            return domain(format!("scale index {m} outside [-3, 3]"));
        }
        Ok(Self { m, es })
    }

    pub fn weights(&self, len: usize) -> Vec<f64> {
        self.es.lambda[..len].iter().map(|l| l.powi(-2 * self.m)).collect()
    }

    /// Coefficients `a_i` of `f = Σ a_i λ_i^m φ_i` to `(λ_i^m a_i)`.
    pub fn forward(&self, coefficients: &[f64]) -> Result<CoordinateVector> {
        self.check_len(coefficients.len())?;
        let values = coefficients
            .iter()
            .zip(&self.es.lambda)
            .map(|(a, l)| l.powi(self.m) * a)
            .collect();
        CoordinateVector::new(values, self.weights(coefficients.len()))
    }

    pub fn inverse(&self, x: &CoordinateVector) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok(x.values
            .iter()
            .zip(&self.es.lambda)
            .map(|(v, l)| v / l.powi(self.m))
            .collect())
    }

    /// Coefficients `a_i = λ_i^{-m} (f, φ_i)` of a grid function.
    pub fn coefficients_of(&self, f: &[f64]) -> Vec<f64> {
        self.es
            .project(f)
            .iter()
            .zip(&self.es.lambda)
            .map(|(b, l)| b / l.powi(self.m))
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.es.count() {
            return Err(Error::DimensionMismatch(format!(
                "{len} coefficients exceed {} modes",
                self.es.count()
            )));
        }
        Ok(())
    }
}

pub fn tau_forward(coefficients: &[f64], m: i32, es: &EigenSystem) -> Result<CoordinateVector> {
    IsometryMap::new(m, es)?.forward(coefficients)
}

pub fn tau_inverse(x: &CoordinateVector, m: i32, es: &EigenSystem) -> Result<Vec<f64>> {
    IsometryMap::new(m, es)?.inverse(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HilbertSchmidtReport {
    pub sum: f64,
    /// Share of the sum contributed by the last quarter of the modes.
    pub tail_fraction: f64,
    /// Last-quarter contribution divided by first-quarter contribution.
    pub tail_to_head: f64,
}

pub fn hilbert_schmidt_sum(lambda: &[f64]) -> HilbertSchmidtReport {
    let sq: Vec<f64> = lambda.iter().map(|l| l * l).collect();
    let sum: f64 = sq.iter().sum();
    let q = lambda.len() / 4;
    let (head, tail) = if q == 0 {
        (sum, 0.0)
    } else {
        (sq[..q].iter().sum(), sq[sq.len() - q..].iter().sum())
    };
    HilbertSchmidtReport {
        sum,
        tail_fraction: if sum > 0.0 { tail / sum } else { 0.0 },
        tail_to_head: if head > 0.0 { tail / head } else { 0.0 },
    }
}

/// Spectrum as CSV: `index,lambda,lambda_squared_cumsum`.
pub fn spectrum_csv(es: &EigenSystem) -> String {
    let mut out = String::from("index,lambda,lambda_squared_cumsum\n");
    let mut cum = 0.0;
    for (i, l) in es.lambda.iter().enumerate() {
        cum += l * l;
        out.push_str(&format!("{},{:.17e},{:.17e}\n", i + 1, l, cum));
    }
    out
}

/// Basis dump, one row per mode. Header lines start with `#`.
pub fn basis_csv(es: &EigenSystem) -> String {
    let mut out = String::new();
    if let Some(g) = es.grid {
        out.push_str(&format!(
            "# grid: dim={} half_width={} points_per_axis={}\n",
            g.dim, g.half_width, g.points_per_axis
        ));
    }
    if let Some(op) = es.operator {
        out.push_str(&format!("# operator: {:?} mass={}\n", op.kind, op.mass));
    }
    out.push_str(&format!("# scale={:.17e}\n", es.scale));
    for i in 0..es.count() {
        let row: Vec<String> = es.basis.column(i).iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&format!("{},{}\n", i + 1, row.join(",")));
    }
    out
}
