//! Windowed one-dimensional jump forms and their `α ↑ 2` local limit.
//!
//! With the window `|y - x| ≤ M`, `M^{2-α} = 1 - α/2` (global) or
//! `(1 - α/2) / ρ(x)` (local), the windowed form tends to
//! `∫ f' g' ρ² dx` or `∫ f' g' ρ dx` respectively.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::quadrature::adaptive;

pub trait Smooth1D: Sync {
    fn value(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
}

/// A strictly positive probability density.
pub trait Density1D: Smooth1D {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianDensity {
    pub mean: f64,
    pub sd: f64,
}

impl Smooth1D for GaussianDensity {
    fn value(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        (-0.5 * z * z).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn derivative(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.sd * self.sd) * self.value(x)
    }
}

impl Density1D for GaussianDensity {}

/// `amplitude · exp(-(x - center)² / (2 width²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBump {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl Smooth1D for GaussianBump {
    fn value(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.width;
        self.amplitude * (-0.5 * z * z).exp()
    }

    fn derivative(&self, x: f64) -> f64 {
        -(x - self.center) / (self.width * self.width) * self.value(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant1D(pub f64);

impl Smooth1D for Constant1D {
    fn value(&self, _: f64) -> f64 {
        self.0
    }

    fn derivative(&self, _: f64) -> f64 {
        0.0
    }
}

/// `a · u + b · w`.
pub struct Combination1D<'a> {
    pub a: f64,
    pub u: &'a dyn Smooth1D,
    pub b: f64,
    pub w: &'a dyn Smooth1D,
}

impl Smooth1D for Combination1D<'_> {
    fn value(&self, x: f64) -> f64 {
        self.a * self.u.value(x) + self.b * self.w.value(x)
    }

    fn derivative(&self, x: f64) -> f64 {
        self.a * self.u.derivative(x) + self.b * self.w.derivative(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalLimitOptions {
    /// Below this offset the increments are replaced by their first-order
    /// Taylor terms.
    pub eps_quad: f64,
    /// Quadrature domain `[-D, D]`; local windows are clipped to it.
    pub domain: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for LocalLimitOptions {
    fn default() -> Self {
        Self { eps_quad: 1e-4, domain: 12.0, abs_tol: 1e-13, rel_tol: 1e-11 }
    }
}

/// `M^{2-α}` in closed form.
pub fn window_power(alpha: f64, window: Window, rho_x: f64) -> f64 {
    match window {
        Window::Global => 1.0 - 0.5 * alpha,
        Window::Local => (1.0 - 0.5 * alpha) / rho_x,
    }
}

/// Window radius `M(α)` or `M(α; x)`.
pub fn window_radius(alpha: f64, window: Window, rho_x: f64) -> f64 {
    window_power(alpha, window, rho_x).powf(1.0 / (2.0 - alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowedValue {
    pub value: f64,
    pub error: f64,
    pub converged: bool,
}

fn inner(f: &dyn Smooth1D, g: &dyn Smooth1D, rho: &dyn Density1D, alpha: f64, window: Window, x: f64, opts: &LocalLimitOptions) -> (f64, bool) {
    let rx = rho.value(x);
    let power = window_power(alpha, window, rx);
    let m = power.powf(1.0 / (2.0 - alpha));
    let eps = opts.eps_quad;
    let (fx, gx) = (f.value(x), g.value(x));
    // ∫_{|h|<r} |h|^{1-α} dh = 2 r^{2-α} / (2-α)
    let near_power = if m <= eps { power } else { eps.powf(2.0 - alpha) };
    let mut value = f.derivative(x) * g.derivative(x) * rx * 2.0 * near_power / (2.0 - alpha);
    let mut converged = true;
    if m > eps {
        for (side, edge) in [(1.0, opts.domain - x), (-1.0, x + opts.domain)] {
            let reach = m.min(edge);
            if reach <= eps {
                continue;
            }
            let r = adaptive(
                |t| {
                    let h = t.exp();
                    let y = x + side * h;
                    (f.value(y) - fx) * (g.value(y) - gx) * rho.value(y) * h.powf(-alpha)
                },
                eps.ln(),
                reach.ln(),
                opts.abs_tol,
                opts.rel_tol,
            );
            value += r.value;
            converged &= r.converged;
        }
    }
    (value, converged)
}

/// `∫ ρ(x) ∫_{|y-x| ≤ M} (f(y)-f(x)) (g(y)-g(x)) |y-x|^{-1-α} ρ(y) dy dx`
/// over `[-D, D]`.
pub fn windowed_form_1d(
    f: &dyn Smooth1D,
    g: &dyn Smooth1D,
    rho: &dyn Density1D,
    alpha: f64,
    window: Window,
    opts: &LocalLimitOptions,
) -> Result<WindowedValue> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return config(format!("α = {alpha} outside (0, 2)"));
    }
    if window == Window::Global && window_radius(alpha, window, 1.0) > opts.domain {
        return config("global window exceeds the quadrature domain");
    }
    let mut inner_ok = true;
    let outer = adaptive(
        |x| {
            let (v, ok) = inner(f, g, rho, alpha, window, x, opts);
            inner_ok &= ok;
            v * rho.value(x)
        },
        -opts.domain,
        opts.domain,
        opts.abs_tol,
        opts.rel_tol,
    );
    if !outer.value.is_finite() {
        return Err(Error::Numeric("windowed form is not finite".into()));
    }
    Ok(WindowedValue { value: outer.value, error: outer.error, converged: outer.converged && inner_ok })
}

/// `∫ f' g' ρ² dx` (global) or `∫ f' g' ρ dx` (local).
pub fn local_limit_reference(f: &dyn Smooth1D, g: &dyn Smooth1D, rho: &dyn Density1D, window: Window, opts: &LocalLimitOptions) -> f64 {
    let power = match window {
        Window::Global => 2,
        Window::Local => 1,
    };
    adaptive(
        |x| f.derivative(x) * g.derivative(x) * rho.value(x).powi(power),
        -opts.domain,
        opts.domain,
        opts.abs_tol * 1e-2,
        opts.rel_tol * 1e-2,
    )
    .value
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalLimitRow {
    pub alpha: f64,
    pub window: Window,
    pub windowed_value: f64,
    pub oracle_value: f64,
    pub rel_error: f64,
}

pub fn local_limit_scan(
    f: &dyn Smooth1D,
    g: &dyn Smooth1D,
    rho: &dyn Density1D,
    alphas: &[f64],
    windows: &[Window],
    opts: &LocalLimitOptions,
) -> Result<Vec<LocalLimitRow>> {
    let mut rows = Vec::new();
    for &window in windows {
        let oracle = local_limit_reference(f, g, rho, window, opts);
        for &alpha in alphas {
            let w = windowed_form_1d(f, g, rho, alpha, window, opts)?;
            rows.push(LocalLimitRow {
                alpha,
                window,
                windowed_value: w.value,
                oracle_value: oracle,
                rel_error: ((w.value - oracle) / oracle).abs(),
            });
        }
    }
    Ok(rows)
}

/// Relative errors differing by less than this are treated as equal when
/// checking monotonicity; it sits above the quadrature tolerances.
pub const REL_ERROR_FLOOR: f64 = 1e-9;

/// Within each window, relative error is nonincreasing in α (up to
/// `REL_ERROR_FLOOR`).
pub fn errors_nonincreasing(rows: &[LocalLimitRow]) -> bool {
    rows.windows(2)
        .filter(|p| p[0].window == p[1].window && p[1].alpha > p[0].alpha)
        .all(|p| p[1].rel_error <= p[0].rel_error + REL_ERROR_FLOOR)
}

pub fn local_limit_csv(rows: &[LocalLimitRow]) -> String {
    let mut out = String::from("alpha,window,windowed_value,oracle_value,rel_error\n");
    for r in rows {
        let w = match r.window {
            Window::Global => "global",
            Window::Local => "local",
        };
        out.push_str(&format!("{},{w},{:.17e},{:.17e},{:.17e}\n", r.alpha, r.windowed_value, r.oracle_value, r.rel_error));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const RHO: GaussianDensity = GaussianDensity { mean: 0.0, sd: 1.0 };
    const BUMP: GaussianBump = GaussianBump { center: 0.3, width: 0.8, amplitude: 1.0 };

    #[test]
    fn window_radius_at_one_and_a_half() {
        assert!((window_radius(1.5, Window::Global, 0.3) - 0.0625).abs() < 1e-15);
        assert!((window_radius(1.0, Window::Local, 0.25) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_function_gives_zero() {
        let c = Constant1D(2.5);
        for w in [Window::Global, Window::Local] {
            let v = windowed_form_1d(&c, &BUMP, &RHO, 1.5, w, &LocalLimitOptions::default()).unwrap();
            assert_eq!(v.value, 0.0);
        }
    }

    #[test]
    fn symmetric_and_homogeneous() {
        let opts = LocalLimitOptions::default();
        let other = GaussianBump { center: -0.5, width: 1.2, amplitude: 0.7 };
        let a = windowed_form_1d(&BUMP, &other, &RHO, 1.2, Window::Local, &opts).unwrap().value;
        let b = windowed_form_1d(&other, &BUMP, &RHO, 1.2, Window::Local, &opts).unwrap().value;
        assert!((a - b).abs() <= 1e-14 * a.abs());
        let twice = GaussianBump { amplitude: 2.0, ..BUMP };
        let c = windowed_form_1d(&twice, &other, &RHO, 1.2, Window::Local, &opts).unwrap().value;
        assert!((c - 2.0 * a).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn rejects_alpha_out_of_range() {
        assert!(windowed_form_1d(&BUMP, &BUMP, &RHO, 2.0, Window::Global, &LocalLimitOptions::default()).is_err());
    }
}

