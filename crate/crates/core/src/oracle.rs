//! Monte Carlo Gaussian smoothing of scalar objectives, and a 1-D quadrature
//! check of the weak-gradient identity `∫ g·K = −∫ L·K′`.
//!
//! `L_σ(θ) = E_ξ[L(θ − ξ)]` with `ξ ~ N(0, σ²I)`, estimated by a sample mean.
//! The gradient estimate averages per-sample gradients at the shifted
//! points. Comparing it with finite differences of [`mc_mollify`] only makes
//! sense under common random numbers: reseed both sides identically.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Step used for per-sample central differences when no analytic gradient
/// is available.
pub const FD_STEP: f64 = 1e-5;

/// Largest kernel mass allowed outside the quadrature grid.
pub const MAX_TAIL_MASS: f64 = 1e-6;

type ValueFn<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;
type GradFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;

/// A deterministic objective `θ ↦ L(θ)` with an optional analytic gradient.
pub struct ObjectiveHandle<'a> {
    dim: usize,
    value: ValueFn<'a>,
    gradient: Option<GradFn<'a>>,
}

impl<'a> ObjectiveHandle<'a> {
    pub fn new(dim: usize, value: impl Fn(&[f64]) -> f64 + 'a) -> Self {
        ObjectiveHandle {
            dim,
            value: Box::new(value),
            gradient: None,
        }
    }

    pub fn with_gradient(mut self, gradient: impl Fn(&[f64]) -> Vec<f64> + 'a) -> Self {
        self.gradient = Some(Box::new(gradient));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        (self.value)(theta)
    }

    /// Analytic gradient if supplied, otherwise central differences.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(theta),
            None => {
                let mut probe = theta.to_vec();
                (0..theta.len())
                    .map(|i| {
                        probe[i] = theta[i] + FD_STEP;
                        let up = self.value(&probe);
                        probe[i] = theta[i] - FD_STEP;
                        let down = self.value(&probe);
                        probe[i] = theta[i];
                        (up - down) / (2.0 * FD_STEP)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinObjective {
    /// `Σ θᵢ²`
    Quadratic,
    /// `Σ |θᵢ|`
    AbsVal,
    /// `Σ (θᵢ² − 1)²`
    DoubleWell,
    /// `Σ 100(θᵢ₊₁ − θᵢ²)² + (1 − θᵢ)²`, needs at least two coordinates.
    Rosenbrock,
}

impl BuiltinObjective {
    pub const ALL: [BuiltinObjective; 4] = [
        BuiltinObjective::Quadratic,
        BuiltinObjective::AbsVal,
        BuiltinObjective::DoubleWell,
        BuiltinObjective::Rosenbrock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinObjective::Quadratic => "quadratic",
            BuiltinObjective::AbsVal => "absval",
            BuiltinObjective::DoubleWell => "double-well",
            BuiltinObjective::Rosenbrock => "rosenbrock",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    pub fn value(self, theta: &[f64]) -> f64 {
        match self {
            BuiltinObjective::Quadratic => theta.iter().map(|t| t * t).sum(),
            BuiltinObjective::AbsVal => theta.iter().map(|t| t.abs()).sum(),
            BuiltinObjective::DoubleWell => theta.iter().map(|t| (t * t - 1.0).powi(2)).sum(),
            BuiltinObjective::Rosenbrock => theta
                .windows(2)
                .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
                .sum(),
        }
    }

    /// Analytic gradient; `|θ|` uses `sign(0) = 0`.
    pub fn gradient(self, theta: &[f64]) -> Vec<f64> {
        match self {
            BuiltinObjective::Quadratic => theta.iter().map(|t| 2.0 * t).collect(),
            BuiltinObjective::AbsVal => theta
                .iter()
                .map(|&t| if t > 0.0 { 1.0 } else if t < 0.0 { -1.0 } else { 0.0 })
                .collect(),
            BuiltinObjective::DoubleWell => theta.iter().map(|t| 4.0 * t * (t * t - 1.0)).collect(),
            BuiltinObjective::Rosenbrock => {
                let mut g = vec![0.0; theta.len()];
                for i in 0..theta.len().saturating_sub(1) {
                    let r = theta[i + 1] - theta[i] * theta[i];
                    g[i] += -400.0 * theta[i] * r - 2.0 * (1.0 - theta[i]);
                    g[i + 1] += 200.0 * r;
                }
                g
            }
        }
    }

    pub fn handle(self, dim: usize) -> Result<ObjectiveHandle<'static>> {
        if dim == 0 {
            return Err(Error::InvalidArgument("objective dimension must be at least 1".into()));
        }
        if self == BuiltinObjective::Rosenbrock && dim < 2 {
            return Err(Error::InvalidArgument("rosenbrock needs at least two coordinates".into()));
        }
        Ok(ObjectiveHandle::new(dim, move |t| self.value(t)).with_gradient(move |t| self.gradient(t)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingSpec {
    /// Gaussian kernel standard deviation; 0 disables smoothing.
    pub sigma: f64,
    pub samples: usize,
}

impl SmoothingSpec {
    pub fn new(sigma: f64, samples: usize) -> Result<Self> {
        let spec = SmoothingSpec { sigma, samples };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if self.samples == 0 {
            return Err(Error::InvalidArgument("at least one sample is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

fn check_theta(obj: &ObjectiveHandle, theta: &[f64]) -> Result<()> {
    if theta.len() != obj.dim() {
        return Err(Error::InvalidArgument(format!(
            "objective has dimension {}, got a point of length {}",
            obj.dim(),
            theta.len()
        )));
    }
    if let Some(index) = theta.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite { context: "objective argument", index });
    }
    Ok(())
}

/// Welford accumulator for mean and standard error of the mean.
#[derive(Default)]
struct Running {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn std_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

fn shifted(theta: &[f64], sigma: f64, rng: &mut RngStream, out: &mut [f64]) {
    for (o, t) in out.iter_mut().zip(theta) {
        *o = t - sigma * rng.normal();
    }
}

/// Sample mean of `L(θ − ξ)` and its standard error.
pub fn mc_mollify(obj: &ObjectiveHandle, theta: &[f64], spec: SmoothingSpec, rng: &mut RngStream) -> Result<Estimate> {
    spec.validate()?;
    check_theta(obj, theta)?;
    if spec.sigma == 0.0 {
        let value = obj.value(theta);
        if !value.is_finite() {
            return Err(Error::NonFinite { context: "smoothed objective sample", index: 0 });
        }
        return Ok(Estimate { value, std_error: 0.0 });
    }
    let mut point = vec![0.0; theta.len()];
    let mut acc = Running::default();
    for i in 0..spec.samples {
        shifted(theta, spec.sigma, rng, &mut point);
        let v = obj.value(&point);
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "smoothed objective sample", index: i });
        }
        acc.push(v);
    }
    Ok(Estimate {
        value: acc.mean,
        std_error: acc.std_error(),
    })
}

/// Average of per-sample gradients at `θ − ξ⁽ⁱ⁾`, with per-coordinate
/// standard errors. Draws the same `ξ` sequence as [`mc_mollify`] for a
/// given stream.
pub fn mc_mollified_grad(
    obj: &ObjectiveHandle,
    theta: &[f64],
    spec: SmoothingSpec,
    rng: &mut RngStream,
) -> Result<GradientEstimate> {
    spec.validate()?;
    check_theta(obj, theta)?;
    let samples = if spec.sigma == 0.0 { 1 } else { spec.samples };
    let mut point = theta.to_vec();
    let mut acc: Vec<Running> = (0..theta.len()).map(|_| Running::default()).collect();
    for i in 0..samples {
        if spec.sigma > 0.0 {
            shifted(theta, spec.sigma, rng, &mut point);
        }
        let g = obj.gradient(&point);
        if g.len() != theta.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient has length {}, expected {}",
                g.len(),
                theta.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "smoothed gradient sample", index: i });
        }
        for (a, v) in acc.iter_mut().zip(g) {
            a.push(v);
        }
    }
    Ok(GradientEstimate {
        mean: acc.iter().map(|a| a.mean).collect(),
        std_error: acc.iter().map(Running::std_error).collect(),
    })
}

fn trapezoid(xs: &[f64], ys: impl Iterator<Item = f64>) -> f64 {
    let ys: Vec<f64> = ys.collect();
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Gaussian kernel mass outside `[lo, hi]`.
pub fn kernel_tail_mass(center: f64, std: f64, lo: f64, hi: f64) -> f64 {
    let s = std * std::f64::consts::SQRT_2;
    0.5 * erfc((center - lo) / s) + 0.5 * erfc((hi - center) / s)
}

/// `|∫ g·K − (−∫ L·K′)|` for a centred Gaussian `K`, by the trapezoidal rule.
pub fn verify_weak_gradient(
    l: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    kernel_std: f64,
    grid: &[f64],
) -> Result<f64> {
    verify_weak_gradient_at(l, g, 0.0, kernel_std, grid)
}

/// As [`verify_weak_gradient`] with the kernel centred at `center`.
pub fn verify_weak_gradient_at(
    l: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    center: f64,
    kernel_std: f64,
    grid: &[f64],
) -> Result<f64> {
    if !(kernel_std > 0.0 && kernel_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("kernel std must be positive, got {kernel_std}")));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
        return Err(Error::InvalidArgument("grid must be strictly increasing with at least two points".into()));
    }
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let tail = kernel_tail_mass(center, kernel_std, lo, hi);
    if tail > MAX_TAIL_MASS {
        return Err(Error::InvalidArgument(format!(
            "grid [{lo}, {hi}] leaves kernel mass {tail:.3e} outside (limit {MAX_TAIL_MASS:e})"
        )));
    }
    let norm = 1.0 / (kernel_std * (2.0 * std::f64::consts::PI).sqrt());
    let k = |x: f64| {
        let z = (x - center) / kernel_std;
        norm * (-0.5 * z * z).exp()
    };
    let dk = |x: f64| -(x - center) / (kernel_std * kernel_std) * k(x);
    let lhs = trapezoid(grid, grid.iter().map(|&x| g(x) * k(x)));
    let rhs = -trapezoid(grid, grid.iter().map(|&x| l(x) * dk(x)));
    let residual = (lhs - rhs).abs();
    if !residual.is_finite() {
        return Err(Error::NonFinite { context: "weak-gradient quadrature", index: 0 });
    }
    Ok(residual)
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "a grid needs at least two points");
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}
