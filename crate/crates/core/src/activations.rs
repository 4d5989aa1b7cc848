//! Noisy activations that interpolate between a nonlinearity and its
//! linearization at the origin.
//!
//! For a unit with pre-activation `x` the forward pass is
//!
//! ```text
//! Δ   = u(x) − f(x)                      saturation gap
//! σ   = (sigmoid(a·Δ) − 0.5)²            adaptive noise scale
//! s   = p·c·σ·|ξ|,   ξ ~ N(0, 1)         half-normal noise
//! ψ   = sgn(u*(x))·min(|u*(x)|, |f*(x) + sgn(u*(x))·s|) + u(0)
//! ```
//!
//! where `u` is the first-order expansion of `f` at 0 and `f*`, `u*` are the
//! origin-centred versions. Large noise pushes `ψ` onto the linear envelope
//! `u`; zero noise returns `f` exactly.
//!
//! ReLU uses the simpler form `s = min(|x|, p·σ·|ξ|)`, `ψ = relu(x) − s`. In
//! the large-noise limit that form tends to `min(x, 0)` rather than to the
//! identity; it is implemented as written.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, RngStream, HALF_NORMAL_MEAN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    /// `clamp(0.25x + 0.5, 0, 1)`.
    HardSigmoid,
    Relu,
    Identity,
}

/// Slope and offset of `u(x) = offset + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub slope: f64,
    pub offset: f64,
}

impl Linearization {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.offset + self.slope * x
    }
}

/// Returns `(f′(0), f(0))`.
pub fn linearize(kind: ActivationKind) -> (f64, f64) {
    let l = kind.linearization();
    (l.slope, l.offset)
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::HardSigmoid => "hard-sigmoid",
            ActivationKind::Relu => "relu",
            ActivationKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sigmoid" => ActivationKind::Sigmoid,
            "tanh" => ActivationKind::Tanh,
            "hard-sigmoid" => ActivationKind::HardSigmoid,
            "relu" => ActivationKind::Relu,
            "identity" => ActivationKind::Identity,
            _ => return None,
        })
    }

    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::HardSigmoid => (0.25 * x + 0.5).clamp(0.0, 1.0),
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Identity => x,
        }
    }

    /// Derivative, taking the one-sided value 0 at the kinks of the
    /// piecewise-linear kinds.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::HardSigmoid => {
                if x > -2.0 && x < 2.0 {
                    0.25
                } else {
                    0.0
                }
            }
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn linearization(self) -> Linearization {
        let (slope, offset) = match self {
            ActivationKind::Sigmoid | ActivationKind::HardSigmoid => (0.25, 0.5),
            ActivationKind::Tanh | ActivationKind::Relu | ActivationKind::Identity => (1.0, 0.0),
        };
        Linearization { slope, offset }
    }

    /// Kinds whose slope at the origin bounds them: `|f*(x)| ≤ |u*(x)|`.
    pub fn is_saturating(self) -> bool {
        matches!(
            self,
            ActivationKind::Sigmoid | ActivationKind::Tanh | ActivationKind::HardSigmoid
        )
    }

    /// Origin-centred activation `f*(x) = f(x) − f(0)`.
    #[inline]
    pub fn centered(self, x: f64) -> f64 {
        self.eval(x) - self.eval(0.0)
    }
}

/// `sgn` with `sgn(0) = 0`.
#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The clamp of the noisy activation for an already scaled noise `s ≥ 0`.
pub fn clamp_to_envelope(kind: ActivationKind, x: f64, s: f64) -> f64 {
    let lin = kind.linearization();
    let u_star = lin.slope * x;
    let g = sgn(u_star);
    g * u_star.abs().min((kind.centered(x) + g * s.abs()).abs()) + lin.offset
}

/// ReLU form: subtract `min(|x|, noise)`.
pub fn relu_with_noise(x: f64, noise: f64) -> f64 {
    x.max(0.0) - x.abs().min(noise.abs())
}

/// Sampled noise for one row of units, kept so the backward pass can reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub xi: Vec<f64>,
    /// Applied noise magnitude per unit, always `≥ 0`.
    pub s: Vec<f64>,
    pub p: f64,
}

impl NoiseRealization {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }
}

/// Per-layer activation state: kind, learnable per-unit sharpness `a` and
/// global noise magnitude `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollifiedActivation {
    pub kind: ActivationKind,
    pub sharpness: Vec<f64>,
    pub c: f64,
}

struct UnitTerms {
    psi: f64,
    s: f64,
}

impl MollifiedActivation {
    pub fn new(kind: ActivationKind, sharpness: Vec<f64>, c: f64) -> Self {
        MollifiedActivation { kind, sharpness, c }
    }

    /// Sharpness drawn from `U[-2, 2]`.
    pub fn with_random_sharpness(kind: ActivationKind, units: usize, c: f64, rng: &mut RngStream) -> Self {
        let sharpness = (0..units).map(|_| rng.uniform(-2.0, 2.0)).collect();
        MollifiedActivation { kind, sharpness, c }
    }

    pub fn units(&self) -> usize {
        self.sharpness.len()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.units() {
            return Err(Error::StaleRealization {
                expected: self.units(),
                actual: n,
            });
        }
        Ok(())
    }

    /// `Δ_i = u(x_i) − f(x_i)`.
    pub fn saturation_gap(&self, x: &[f64]) -> Vec<f64> {
        let lin = self.kind.linearization();
        x.iter().map(|&v| lin.eval(v) - self.kind.eval(v)).collect()
    }

    /// `σ(x_i) = (sigmoid(a_i·Δ_i) − 0.5)²`.
    pub fn noise_std(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok(self
            .saturation_gap(x)
            .iter()
            .zip(&self.sharpness)
            .map(|(&d, &a)| {
                let q = sigmoid(a * d) - 0.5;
                q * q
            })
            .collect())
    }

    fn unit_forward(&self, x: f64, a: f64, p: f64, abs_xi: f64) -> UnitTerms {
        let kind = self.kind;
        let lin = kind.linearization();
        let delta = lin.eval(x) - kind.eval(x);
        let q = sigmoid(a * delta) - 0.5;
        let sigma = q * q;
        if kind == ActivationKind::Relu {
            let s = x.abs().min(p * sigma * abs_xi);
            return UnitTerms {
                psi: x.max(0.0) - s,
                s,
            };
        }
        let s = p * self.c * sigma * abs_xi;
        UnitTerms {
            psi: clamp_to_envelope(kind, x, s),
            s,
        }
    }

    /// Derivatives of the frozen-noise forward with respect to `x` and `a`.
    fn unit_backward(&self, x: f64, a: f64, p: f64, abs_xi: f64) -> (f64, f64) {
        let kind = self.kind;
        let lin = kind.linearization();
        let fx = kind.eval(x);
        let dfx = kind.derivative(x);
        let delta = lin.eval(x) - fx;
        let sg = sigmoid(a * delta);
        let q = sg - 0.5;
        let sigma = q * q;
        // dσ/d(aΔ)
        let dsigma = 2.0 * q * sg * (1.0 - sg);
        let ddelta_dx = lin.slope - dfx;

        if kind == ActivationKind::Relu {
            let noise = p * sigma * abs_xi;
            if x.abs() <= noise {
                return (dfx - sgn(x), 0.0);
            }
            let dn_dx = p * abs_xi * dsigma * a * ddelta_dx;
            let dn_da = p * abs_xi * dsigma * delta;
            return (dfx - dn_dx, -dn_da);
        }

        let u_star = lin.slope * x;
        let g = sgn(u_star);
        let s = p * self.c * sigma * abs_xi;
        let inner = kind.centered(x) + g * s;
        if u_star.abs() <= inner.abs() {
            return (g * g * lin.slope, 0.0);
        }
        let ds_dx = p * self.c * abs_xi * dsigma * a * ddelta_dx;
        let ds_da = p * self.c * abs_xi * dsigma * delta;
        let outer = g * sgn(inner);
        (outer * (dfx + g * ds_dx), outer * g * ds_da)
    }

    /// Noisy activation for one row of units with freshly drawn `ξ`.
    pub fn noisy_activation(&self, x: &[f64], p: f64, rng: &mut RngStream) -> Result<(Vec<f64>, NoiseRealization)> {
        self.check_len(x.len())?;
        let xi: Vec<f64> = (0..x.len()).map(|_| rng.normal()).collect();
        self.noisy_activation_frozen(x, p, xi)
    }

    /// Noisy activation at a given noise draw `ξ`.
    pub fn noisy_activation_frozen(&self, x: &[f64], p: f64, xi: Vec<f64>) -> Result<(Vec<f64>, NoiseRealization)> {
        self.check_len(x.len())?;
        self.check_len(xi.len())?;
        let mut out = Vec::with_capacity(x.len());
        let mut s = Vec::with_capacity(x.len());
        for ((&xv, &a), &z) in x.iter().zip(&self.sharpness).zip(&xi) {
            let t = self.unit_forward(xv, a, p, z.abs());
            out.push(t.psi);
            s.push(t.s);
        }
        Ok((out, NoiseRealization { xi, s, p }))
    }

    /// ReLU variant; errors when the activation is not a ReLU.
    pub fn noisy_relu(&self, x: &[f64], p: f64, rng: &mut RngStream) -> Result<(Vec<f64>, NoiseRealization)> {
        if self.kind != ActivationKind::Relu {
            return Err(Error::InvalidArgument(format!(
                "noisy_relu called on a {} activation",
                self.kind.name()
            )));
        }
        self.noisy_activation(x, p, rng)
    }

    /// Deterministic inference form: `|ξ|` replaced by its mean `√(2/π)`.
    pub fn expected_activation(&self, x: &[f64], p: f64) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok(x.iter()
            .zip(&self.sharpness)
            .map(|(&xv, &a)| self.unit_forward(xv, a, p, HALF_NORMAL_MEAN).psi)
            .collect())
    }

    /// Gradients through a stored realization: returns `(∂/∂x, ∂/∂a)` times
    /// `upstream`. `min` takes the active branch, ties go to the envelope
    /// `|u*|`, and `sgn` is held constant.
    pub fn backward(
        &self,
        realization: &NoiseRealization,
        x: &[f64],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(realization.len())?;
        if x.len() != realization.len() || upstream.len() != realization.len() {
            return Err(Error::StaleRealization {
                expected: realization.len(),
                actual: x.len().min(upstream.len()),
            });
        }
        let mut gx = Vec::with_capacity(x.len());
        let mut ga = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let (dx, da) = self.unit_backward(x[i], self.sharpness[i], realization.p, realization.xi[i].abs());
            gx.push(dx * upstream[i]);
            ga.push(da * upstream[i]);
        }
        Ok((gx, ga))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, Matrix};
    use proptest::prelude::*;

    const SATURATING: [ActivationKind; 3] = [
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::HardSigmoid,
    ];

    fn act(kind: ActivationKind, a: f64, c: f64) -> MollifiedActivation {
        MollifiedActivation::new(kind, vec![a], c)
    }

    #[test]
    fn linearizations() {
        assert_eq!(linearize(ActivationKind::Sigmoid), (0.25, 0.5));
        assert_eq!(linearize(ActivationKind::Tanh), (1.0, 0.0));
        assert_eq!(linearize(ActivationKind::HardSigmoid), (0.25, 0.5));
        assert_eq!(linearize(ActivationKind::Relu), (1.0, 0.0));
        for kind in SATURATING {
            let lin = kind.linearization();
            assert_eq!(lin.eval(0.0), kind.eval(0.0));
        }
    }

    #[test]
    fn hard_sigmoid_inverse_on_linear_region() {
        for &y in &[0.1, 0.25, 0.5, 0.9] {
            let x = 4.0 * (y - 0.5);
            assert!((ActivationKind::HardSigmoid.eval(x) - y).abs() < 1e-15);
        }
    }

    #[test]
    fn saturation_gap_values() {
        for kind in SATURATING {
            assert_eq!(act(kind, 1.0, 1.0).saturation_gap(&[0.0]), vec![0.0]);
        }
        let d = act(ActivationKind::Sigmoid, 1.0, 1.0).saturation_gap(&[4.0])[0];
        let expected = 1.5 - 1.0 / (1.0 + (-4.0_f64).exp());
        assert!((d - expected).abs() < 1e-15);
        assert!((d - 0.51799).abs() < 1e-5);
        let d = act(ActivationKind::Tanh, 1.0, 1.0).saturation_gap(&[-3.0])[0];
        assert!((d - (-3.0 - (-3.0_f64).tanh())).abs() < 1e-15);
        assert!((d + 2.00495).abs() < 1e-5);
    }

    #[test]
    fn noise_std_values() {
        let m = act(ActivationKind::Sigmoid, 1.0, 1.0);
        assert_eq!(m.noise_std(&[0.0]).unwrap(), vec![0.0]);
        let big = MollifiedActivation::new(ActivationKind::Sigmoid, vec![1e6], 1.0);
        assert!((big.noise_std(&[4.0]).unwrap()[0] - 0.25).abs() < 1e-12);
        // a = 1 and x = 4 gives Δ ≈ 0.51799
        let sd = m.noise_std(&[4.0]).unwrap()[0];
        let delta = 1.5 - 1.0 / (1.0 + (-4.0_f64).exp());
        let expected = (1.0 / (1.0 + (-delta).exp()) - 0.5).powi(2);
        assert!((sd - expected).abs() < 1e-15);
        assert!((sd - 0.016045).abs() < 5e-6);
    }

    #[test]
    fn zero_noise_recovers_f_on_grid() {
        let mut rng = RngStream::new(3);
        for kind in SATURATING {
            let xs: Vec<f64> = (0..=1200).map(|i| -6.0 + i as f64 * 0.01).collect();
            let m = MollifiedActivation::new(kind, vec![1.3; xs.len()], 1.0);
            let (psi, real) = m.noisy_activation(&xs, 0.0, &mut rng).unwrap();
            assert!(real.s.iter().all(|&s| s == 0.0));
            for (x, y) in xs.iter().zip(&psi) {
                assert!((y - kind.eval(*x)).abs() <= 1e-15, "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn saturated_noise_yields_linear_function() {
        let psi = clamp_to_envelope(ActivationKind::Sigmoid, 2.0, 10.0);
        assert_eq!(psi, 1.0);
        assert_eq!(psi, ActivationKind::Sigmoid.linearization().eval(2.0));
    }

    #[test]
    fn origin_is_fixed() {
        let mut rng = RngStream::new(9);
        for kind in SATURATING {
            let m = act(kind, 1.7, 5.0);
            for &p in &[0.0, 0.3, 1.0] {
                let (psi, _) = m.noisy_activation(&[0.0], p, &mut rng).unwrap();
                assert_eq!(psi[0], kind.eval(0.0));
            }
        }
    }

    #[test]
    fn relu_examples() {
        let mut rng = RngStream::new(1);
        let m = act(ActivationKind::Relu, 1.0, 1.0);
        for &x in &[-2.0, -0.5, 0.0, 0.7, 3.0] {
            let (psi, _) = m.noisy_relu(&[x], 0.0, &mut rng).unwrap();
            assert_eq!(psi[0], x.max(0.0));
        }
        assert_eq!(relu_with_noise(-1.0, 1e9), -1.0);
        assert_eq!(relu_with_noise(2.0, 1e9), 0.0);
        let sig = act(ActivationKind::Sigmoid, 1.0, 1.0);
        assert!(sig.noisy_relu(&[1.0], 0.5, &mut rng).is_err());
    }

    #[test]
    fn backward_without_noise_is_plain_derivative() {
        let m = act(ActivationKind::Sigmoid, 0.8, 1.0);
        let mut rng = RngStream::new(2);
        for &x in &[-3.0, -0.2, 0.4, 2.5] {
            let (_, real) = m.noisy_activation(&[x], 0.0, &mut rng).unwrap();
            let (gx, ga) = m.backward(&real, &[x], &[1.7]).unwrap();
            let expected = ActivationKind::Sigmoid.derivative(x) * 1.7;
            assert!((gx[0] - expected).abs() < 1e-15);
            assert_eq!(ga[0], 0.0);
        }
    }

    #[test]
    fn backward_on_clamped_branch_is_envelope_slope() {
        let m = MollifiedActivation::new(ActivationKind::Sigmoid, vec![2.0], 1e6);
        let real = NoiseRealization {
            xi: vec![3.0],
            s: vec![0.0],
            p: 1.0,
        };
        let (gx, ga) = m.backward(&real, &[2.0], &[1.0]).unwrap();
        assert_eq!(gx[0], 0.25);
        assert_eq!(ga[0], 0.0);
    }

    #[test]
    fn stale_realization_is_rejected() {
        let m = MollifiedActivation::new(ActivationKind::Tanh, vec![1.0, 1.0], 1.0);
        let real = NoiseRealization {
            xi: vec![0.1],
            s: vec![0.0],
            p: 0.5,
        };
        assert!(matches!(
            m.backward(&real, &[0.1, 0.2], &[1.0, 1.0]),
            Err(Error::StaleRealization { .. })
        ));
    }

    #[test]
    fn frozen_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(2024);
        let kinds = [
            ActivationKind::Sigmoid,
            ActivationKind::Tanh,
            ActivationKind::HardSigmoid,
            ActivationKind::Relu,
        ];
        let mut checked = 0;
        while checked < 100 {
            let kind = kinds[checked % kinds.len()];
            let x = rng.uniform(-5.0, 5.0);
            let a = rng.uniform(-2.0, 2.0);
            let p = rng.uniform(0.0, 1.0);
            let xi = rng.normal();
            let c = rng.uniform(0.5, 8.0);
            // keep probes away from the kinks of the piecewise kinds
            if kind == ActivationKind::HardSigmoid && (x.abs() - 2.0).abs() < 1e-3 {
                continue;
            }
            let m = MollifiedActivation::new(kind, vec![a], c);
            let forward_x = |v: &Matrix| m.noisy_activation_frozen(v.as_slice(), p, vec![xi]).unwrap().0[0];
            let at = Matrix::from_vec(1, 1, vec![x]).unwrap();
            let fd_x = finite_diff_grad(forward_x, &at, 1e-5).unwrap().get(0, 0);
            let fd_a = finite_diff_grad(
                |v: &Matrix| {
                    MollifiedActivation::new(kind, vec![v.get(0, 0)], c)
                        .noisy_activation_frozen(&[x], p, vec![xi])
                        .unwrap()
                        .0[0]
                },
                &Matrix::from_vec(1, 1, vec![a]).unwrap(),
                1e-5,
            )
            .unwrap()
            .get(0, 0);
            let (_, real) = m.noisy_activation_frozen(&[x], p, vec![xi]).unwrap();
            let (gx, ga) = m.backward(&real, &[x], &[1.0]).unwrap();
            assert!(relative_error(gx[0], fd_x, 1e-4) < 1e-6, "{kind:?} x={x} a={a} p={p} xi={xi}: {} vs {fd_x}", gx[0]);
            assert!(relative_error(ga[0], fd_a, 1e-4) < 1e-6, "{kind:?} da x={x} a={a} p={p}: {} vs {fd_a}", ga[0]);
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn psi_stays_inside_envelope(x in -8.0..8.0f64, a in -2.0..2.0f64, p in 0.0..=1.0f64, xi in -4.0..4.0f64, k in 0usize..3) {
            let kind = SATURATING[k];
            let m = MollifiedActivation::new(kind, vec![a], 3.0);
            let (psi, real) = m.noisy_activation_frozen(&[x], p, vec![xi]).unwrap();
            let lin = kind.linearization();
            let bound = (lin.slope * x).abs();
            prop_assert!(real.s[0] >= 0.0);
            prop_assert!(psi[0] >= lin.offset - bound - 1e-15);
            prop_assert!(psi[0] <= lin.offset + bound + 1e-15);
        }

        #[test]
        fn more_noise_moves_toward_linearization(x in -8.0..8.0f64, a in -2.0..2.0f64, p1 in 0.0..=1.0f64, p2 in 0.0..=1.0f64, xi in -4.0..4.0f64, k in 0usize..3) {
            let kind = SATURATING[k];
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let m = MollifiedActivation::new(kind, vec![a], 2.0);
            let u = kind.linearization().eval(x);
            let at_lo = m.noisy_activation_frozen(&[x], lo, vec![xi]).unwrap().0[0];
            let at_hi = m.noisy_activation_frozen(&[x], hi, vec![xi]).unwrap().0[0];
            prop_assert!((at_hi - u).abs() <= (at_lo - u).abs() + 1e-15);
        }

        #[test]
        fn zero_p_means_zero_noise(x in -8.0..8.0f64, xi in -4.0..4.0f64) {
            let m = MollifiedActivation::new(ActivationKind::Tanh, vec![1.0], 4.0);
            let (_, real) = m.noisy_activation_frozen(&[x], 0.0, vec![xi]).unwrap();
            prop_assert_eq!(real.s[0], 0.0);
        }
    }
}
