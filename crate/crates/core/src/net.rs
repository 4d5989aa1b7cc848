//! Mollified feedforward networks.
//!
//! Each hidden unit either copies the (adapted) activation of the layer below
//! or emits a noisy activation of an affine map of it:
//!
//! ```text
//! x  = h·W + b
//! ψ̃  = noisy_activation(x; p)
//! π  ~ Bernoulli(p)                   per unit, per example
//! h' = π ⊙ adapt(h) + (1 − π) ⊙ ψ̃
//! ```
//!
//! At `p = 1` every hidden layer is the identity (up to zero padding), so the
//! loss is convex in the output layer. At `p = 0` with `c = 0` the network is
//! the plain MLP. Gradients are exact derivatives of the forward pass at the
//! sampled `ξ` and `π`.

use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, MollifiedActivation, NoiseRealization};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix, OptimizerState, RngStream};

/// How the identity path maps `fan_in` activations onto `fan_out` units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Adapter {
    None,
    ZeroPad,
    Projection { matrix: Matrix },
}

impl Adapter {
    pub fn name(&self) -> &'static str {
        match self {
            Adapter::None => "none",
            Adapter::ZeroPad => "zero-pad",
            Adapter::Projection { .. } => "linear-projection",
        }
    }
}

fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform(-limit, limit)).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("glorot draw is finite")
}

/// Weight-noise mollification parameters: `ξ ~ N(μ, σ²)` subtracted from `W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightNoiseConfig {
    pub mu: f64,
    pub sigma: f64,
}

/// Sampled per-layer randomness for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    /// Standard-normal draws, `batch × fan_out`.
    pub xi: Matrix,
    /// Identity-path mask, entries in `{0, 1}`.
    pub mask: Matrix,
}

impl LayerNoise {
    /// Draws `ξ` then `π` for each example in turn.
    pub fn sample(batch: usize, units: usize, p: f64, rng: &mut RngStream) -> Self {
        let mut xi = Matrix::zeros(batch, units);
        let mut mask = Matrix::zeros(batch, units);
        for r in 0..batch {
            for v in xi.row_mut(r) {
                *v = rng.normal();
            }
            for v in mask.row_mut(r) {
                *v = if rng.bernoulli(p) { 1.0 } else { 0.0 };
            }
        }
        LayerNoise { xi, mask }
    }
}

/// Everything the backward pass needs from a layer's forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Matrix,
    pub adapted: Matrix,
    pub pre: Matrix,
    pub noise: LayerNoise,
    pub realizations: Vec<NoiseRealization>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Matrix,
    pub sharpness: Matrix,
    pub projection: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollifiedLayer {
    /// `fan_in × fan_out`.
    pub weights: Matrix,
    /// `1 × fan_out`.
    pub bias: Matrix,
    pub activation: MollifiedActivation,
    pub adapter: Adapter,
    /// Adds the adapted input to the nonlinear path as well.
    pub residual: bool,
}

impl MollifiedLayer {
    /// Glorot-uniform weights, zero bias, sharpness from `U[-2, 2]` and the
    /// default adapter: none when sizes match, zero padding when growing, a
    /// Glorot-initialised projection when shrinking.
    pub fn glorot(
        fan_in: usize,
        fan_out: usize,
        kind: ActivationKind,
        c: f64,
        residual: bool,
        rng: &mut RngStream,
    ) -> Self {
        let weights = glorot_uniform(fan_in, fan_out, rng);
        let activation = MollifiedActivation::with_random_sharpness(kind, fan_out, c, rng);
        let adapter = if fan_in == fan_out {
            Adapter::None
        } else if fan_in < fan_out {
            Adapter::ZeroPad
        } else {
            Adapter::Projection {
                matrix: glorot_uniform(fan_in, fan_out, rng),
            }
        };
        MollifiedLayer {
            weights,
            bias: Matrix::zeros(1, fan_out),
            activation,
            adapter,
            residual,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    /// Checks internal shape consistency; `index` is only used in errors.
    pub fn validate(&self, index: usize) -> Result<()> {
        let (fan_in, fan_out) = self.weights.shape();
        if self.bias.shape() != (1, fan_out) {
            return Err(Error::shapes("layer bias", (1, fan_out), self.bias.shape()));
        }
        if self.activation.units() != fan_out {
            return Err(Error::shapes("layer sharpness", (1, fan_out), (1, self.activation.units())));
        }
        if !(self.activation.c >= 0.0 && self.activation.c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise constant must be non-negative, got {}",
                self.activation.c
            )));
        }
        match &self.adapter {
            Adapter::None if fan_in != fan_out => Err(Error::MissingAdapter {
                layer: index,
                fan_in,
                fan_out,
            }),
            Adapter::ZeroPad if fan_in > fan_out => Err(Error::PaddingCannotShrink { fan_in, fan_out }),
            Adapter::Projection { matrix } if matrix.shape() != (fan_in, fan_out) => {
                Err(Error::shapes("projection", (fan_in, fan_out), matrix.shape()))
            }
            _ => Ok(()),
        }
    }

    fn check_input(&self, h_prev: &Matrix) -> Result<()> {
        if h_prev.cols() != self.fan_in() {
            return Err(Error::shapes("layer input", h_prev.shape(), self.weights.shape()));
        }
        Ok(())
    }

    /// Maps the layer input onto `fan_out` columns for the identity path.
    pub fn adapt(&self, h_prev: &Matrix) -> Result<Matrix> {
        self.check_input(h_prev)?;
        let (fan_in, fan_out) = self.weights.shape();
        match &self.adapter {
            Adapter::None => {
                if fan_in != fan_out {
                    return Err(Error::MissingAdapter {
                        layer: 0,
                        fan_in,
                        fan_out,
                    });
                }
                Ok(h_prev.clone())
            }
            Adapter::ZeroPad => {
                if fan_in > fan_out {
                    return Err(Error::PaddingCannotShrink { fan_in, fan_out });
                }
                let mut out = Matrix::zeros(h_prev.rows(), fan_out);
                for r in 0..h_prev.rows() {
                    out.row_mut(r)[..fan_in].copy_from_slice(h_prev.row(r));
                }
                Ok(out)
            }
            Adapter::Projection { matrix } => h_prev.matmul(matrix),
        }
    }

    pub fn preactivation(&self, h_prev: &Matrix) -> Result<Matrix> {
        self.check_input(h_prev)?;
        let mut x = h_prev.matmul(&self.weights)?;
        x.add_row_broadcast(&self.bias)?;
        Ok(x)
    }

    /// Training forward pass with freshly sampled `ξ` and `π`.
    pub fn forward_train(&self, h_prev: &Matrix, p: f64, rng: &mut RngStream) -> Result<(Matrix, LayerCache)> {
        self.check_input(h_prev)?;
        let noise = LayerNoise::sample(h_prev.rows(), self.fan_out(), p, rng);
        self.forward_with_noise(h_prev, p, noise)
    }

    /// Training forward pass at a given noise draw.
    pub fn forward_with_noise(&self, h_prev: &Matrix, p: f64, noise: LayerNoise) -> Result<(Matrix, LayerCache)> {
        let adapted = self.adapt(h_prev)?;
        let pre = self.preactivation(h_prev)?;
        if noise.xi.shape() != pre.shape() || noise.mask.shape() != pre.shape() {
            return Err(Error::shapes("layer noise", pre.shape(), noise.xi.shape()));
        }
        let mut out = Matrix::zeros(pre.rows(), pre.cols());
        let mut realizations = Vec::with_capacity(pre.rows());
        for r in 0..pre.rows() {
            let (psi, real) = self
                .activation
                .noisy_activation_frozen(pre.row(r), p, noise.xi.row(r).to_vec())?;
            let skip = adapted.row(r);
            let mask = noise.mask.row(r);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                let keep = mask[j];
                let nonlinear = if self.residual { psi[j] + skip[j] } else { psi[j] };
                *o = keep * skip[j] + (1.0 - keep) * nonlinear;
            }
            realizations.push(real);
        }
        let cache = LayerCache {
            input: h_prev.clone(),
            adapted,
            pre,
            noise,
            realizations,
            p,
        };
        Ok((out, cache))
    }

    /// Deterministic forward pass: `π` replaced by `p`, `|ξ|` by `√(2/π)`.
    pub fn forward_infer(&self, h_prev: &Matrix, p: f64) -> Result<Matrix> {
        let adapted = self.adapt(h_prev)?;
        let pre = self.preactivation(h_prev)?;
        let mut out = Matrix::zeros(pre.rows(), pre.cols());
        for r in 0..pre.rows() {
            let psi = self.activation.expected_activation(pre.row(r), p)?;
            let skip = adapted.row(r);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                let nonlinear = if self.residual { psi[j] + skip[j] } else { psi[j] };
                *o = p * skip[j] + (1.0 - p) * nonlinear;
            }
        }
        Ok(out)
    }

    /// `f((W − ξ)·h + b)` with `ξ ~ N(μ, σ²)` drawn once per call.
    pub fn weight_noise_forward(&self, h_prev: &Matrix, cfg: WeightNoiseConfig, rng: &mut RngStream) -> Result<Matrix> {
        if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight-noise std must be non-negative, got {}",
                cfg.sigma
            )));
        }
        self.check_input(h_prev)?;
        let mut noisy = self.weights.clone();
        if cfg.sigma > 0.0 || cfg.mu != 0.0 {
            for w in noisy.as_mut_slice() {
                *w -= cfg.mu + cfg.sigma * rng.normal();
            }
        }
        let mut x = h_prev.matmul(&noisy)?;
        x.add_row_broadcast(&self.bias)?;
        let kind = self.activation.kind;
        Ok(x.map(|v| kind.eval(v)))
    }

    /// Backward pass through a cached forward pass. Returns the gradient with
    /// respect to the layer input and the parameter gradients.
    pub fn backward(&self, cache: &LayerCache, upstream: &Matrix) -> Result<(Matrix, LayerGrads)> {
        if upstream.shape() != cache.pre.shape() {
            return Err(Error::shapes("layer backward", cache.pre.shape(), upstream.shape()));
        }
        let (batch, units) = upstream.shape();
        let mut d_pre = Matrix::zeros(batch, units);
        let mut d_adapted = Matrix::zeros(batch, units);
        let mut d_sharp = Matrix::zeros(1, units);
        for r in 0..batch {
            let up = upstream.row(r);
            let mask = cache.noise.mask.row(r);
            let d_psi: Vec<f64> = up.iter().zip(mask).map(|(g, m)| (1.0 - m) * g).collect();
            let (gx, ga) = self
                .activation
                .backward(&cache.realizations[r], cache.pre.row(r), &d_psi)?;
            d_pre.row_mut(r).copy_from_slice(&gx);
            for (acc, g) in d_sharp.as_mut_slice().iter_mut().zip(&ga) {
                *acc += g;
            }
            for (j, da) in d_adapted.row_mut(r).iter_mut().enumerate() {
                *da = if self.residual { up[j] } else { mask[j] * up[j] };
            }
        }
        let d_weights = cache.input.t_matmul(&d_pre)?;
        let d_bias = d_pre.sum_rows();
        let mut d_input = d_pre.matmul_t(&self.weights)?;
        let mut d_projection = None;
        match &self.adapter {
            Adapter::None => d_input.add_assign(&d_adapted)?,
            Adapter::ZeroPad => {
                let fan_in = self.fan_in();
                for r in 0..batch {
                    let src = &d_adapted.row(r)[..fan_in];
                    for (d, s) in d_input.row_mut(r).iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Adapter::Projection { matrix } => {
                d_input.add_assign(&d_adapted.matmul_t(matrix)?)?;
                d_projection = Some(cache.input.t_matmul(&d_adapted)?);
            }
        }
        Ok((
            d_input,
            LayerGrads {
                weights: d_weights,
                bias: d_bias,
                sharpness: d_sharp,
                projection: d_projection,
            },
        ))
    }
}

/// Loss attached to the output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Per-output logistic loss against `{0, 1}` targets.
    SigmoidCrossEntropy,
    /// Softmax over the outputs against one-hot targets.
    SoftmaxCrossEntropy,
    /// `½‖z − y‖²` per example.
    MeanSquared,
}

impl Head {
    /// Mean loss over the batch and its gradient with respect to the logits.
    pub fn loss_and_grad(self, logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
        if logits.shape() != targets.shape() {
            return Err(Error::shapes("head targets", logits.shape(), targets.shape()));
        }
        let batch = logits.rows().max(1) as f64;
        let mut grad = Matrix::zeros(logits.rows(), logits.cols());
        let mut total = 0.0;
        for r in 0..logits.rows() {
            let z = logits.row(r);
            let y = targets.row(r);
            let g = grad.row_mut(r);
            match self {
                Head::SigmoidCrossEntropy => {
                    for j in 0..z.len() {
                        total += z[j].max(0.0) - z[j] * y[j] + (-z[j].abs()).exp().ln_1p();
                        g[j] = (sigmoid(z[j]) - y[j]) / batch;
                    }
                }
                Head::SoftmaxCrossEntropy => {
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    let log_z = m + sum.ln();
                    for j in 0..z.len() {
                        total -= y[j] * (z[j] - log_z);
                        g[j] = ((z[j] - log_z).exp() - y[j]) / batch;
                    }
                }
                Head::MeanSquared => {
                    for j in 0..z.len() {
                        let d = z[j] - y[j];
                        total += 0.5 * d * d;
                        g[j] = d / batch;
                    }
                }
            }
        }
        Ok((total / batch, grad))
    }

    pub fn loss(self, logits: &Matrix, targets: &Matrix) -> Result<f64> {
        Ok(self.loss_and_grad(logits, targets)?.0)
    }

    /// Fraction of examples predicted correctly. For the squared loss a
    /// prediction counts when every output is within 0.25 of its target.
    pub fn accuracy(self, logits: &Matrix, targets: &Matrix) -> Result<f64> {
        if logits.shape() != targets.shape() {
            return Err(Error::shapes("head targets", logits.shape(), targets.shape()));
        }
        if logits.rows() == 0 {
            return Ok(0.0);
        }
        let argmax = |row: &[f64]| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        };
        let correct = (0..logits.rows())
            .filter(|&r| {
                let z = logits.row(r);
                let y = targets.row(r);
                match self {
                    Head::SigmoidCrossEntropy => z
                        .iter()
                        .zip(y)
                        .all(|(&zv, &yv)| (zv > 0.0) == (yv > 0.5)),
                    Head::SoftmaxCrossEntropy => argmax(z) == argmax(y),
                    Head::MeanSquared => z.iter().zip(y).all(|(a, b)| (a - b).abs() <= 0.25),
                }
            })
            .count();
        Ok(correct as f64 / logits.rows() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLayer {
    pub weights: Matrix,
    pub bias: Matrix,
    pub head: Head,
}

impl OutputLayer {
    pub fn glorot(fan_in: usize, outputs: usize, head: Head, rng: &mut RngStream) -> Self {
        OutputLayer {
            weights: glorot_uniform(fan_in, outputs, rng),
            bias: Matrix::zeros(1, outputs),
            head,
        }
    }

    pub fn logits(&self, h: &Matrix) -> Result<Matrix> {
        let mut z = h.matmul(&self.weights)?;
        z.add_row_broadcast(&self.bias)?;
        Ok(z)
    }
}

/// Record of a full training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub caches: Vec<LayerCache>,
    pub top: Matrix,
    pub logits: Matrix,
}

impl ForwardPass {
    /// The sampled noise of every layer, for replaying the same realization.
    pub fn noise(&self) -> Vec<LayerNoise> {
        self.caches.iter().map(|c| c.noise.clone()).collect()
    }
}

/// Gradients in parameter order (see [`MollifiedNet::parameters`]).
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
    pub output_weights: Matrix,
    pub output_bias: Matrix,
}

impl NetGrads {
    pub fn flatten(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.push(g.weights.clone());
            out.push(g.bias.clone());
            out.push(g.sharpness.clone());
            if let Some(p) = &g.projection {
                out.push(p.clone());
            }
        }
        out.push(self.output_weights.clone());
        out.push(self.output_bias.clone());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollifiedNet {
    pub layers: Vec<MollifiedLayer>,
    pub output: OutputLayer,
}

impl MollifiedNet {
    pub fn new(layers: Vec<MollifiedLayer>, output: OutputLayer) -> Result<Self> {
        let net = MollifiedNet { layers, output };
        net.validate()?;
        Ok(net)
    }

    /// `depth` hidden layers of `hidden` units on top of `inputs` features.
    #[allow(clippy::too_many_arguments)]
    pub fn glorot(
        inputs: usize,
        hidden: usize,
        depth: usize,
        outputs: usize,
        kind: ActivationKind,
        head: Head,
        c: f64,
        residual: bool,
        rng: &mut RngStream,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut fan_in = inputs;
        for _ in 0..depth {
            layers.push(MollifiedLayer::glorot(fan_in, hidden, kind, c, residual, rng));
            fan_in = hidden;
        }
        let output = OutputLayer::glorot(fan_in, outputs, head, rng);
        MollifiedNet { layers, output }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(i + 1)?;
            if i > 0 && layer.fan_in() != self.layers[i - 1].fan_out() {
                return Err(Error::shapes(
                    "layer chain",
                    self.layers[i - 1].weights.shape(),
                    layer.weights.shape(),
                ));
            }
        }
        let top = self.layers.last().map(|l| l.fan_out());
        if let Some(top) = top {
            if self.output.weights.rows() != top {
                return Err(Error::shapes("output layer", (1, top), self.output.weights.shape()));
            }
        }
        if self.output.bias.shape() != (1, self.output.weights.cols()) {
            return Err(Error::shapes("output bias", (1, self.output.weights.cols()), self.output.bias.shape()));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.output.weights.rows(), |l| l.fan_in())
    }

    pub fn output_dim(&self) -> usize {
        self.output.weights.cols()
    }

    /// Sets the noise constant `c` on every layer.
    pub fn set_noise_constant(&mut self, c: f64) {
        for l in &mut self.layers {
            l.activation.c = c;
        }
    }

    fn check_levels(&self, levels: &[f64]) -> Result<()> {
        if levels.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} levels supplied for {} layers",
                levels.len(),
                self.layers.len()
            )));
        }
        if let Some(p) = levels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("level {p} outside [0, 1]")));
        }
        Ok(())
    }

    /// Training forward pass; `rngs[l]` drives layer `l`'s noise.
    pub fn forward_train(&self, batch: &Matrix, levels: &[f64], rngs: &mut [RngStream]) -> Result<ForwardPass> {
        self.check_levels(levels)?;
        if rngs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} random streams supplied for {} layers",
                rngs.len(),
                self.layers.len()
            )));
        }
        let noise = self
            .layers
            .iter()
            .zip(levels)
            .zip(rngs.iter_mut())
            .map(|((layer, &p), rng)| LayerNoise::sample(batch.rows(), layer.fan_out(), p, rng))
            .collect();
        self.forward_with_noise(batch, levels, noise)
    }

    /// Training forward pass at a fixed realization of every layer's noise.
    pub fn forward_with_noise(&self, batch: &Matrix, levels: &[f64], noise: Vec<LayerNoise>) -> Result<ForwardPass> {
        self.check_levels(levels)?;
        if noise.len() != self.layers.len() {
            return Err(Error::InvalidArgument("one noise record per layer required".into()));
        }
        let mut h = batch.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, ((layer, &p), n)) in self.layers.iter().zip(levels).zip(noise).enumerate() {
            let (out, cache) = layer.forward_with_noise(&h, p, n)?;
            if !out.is_finite() {
                return Err(Error::NonFiniteLayer { layer: i + 1 });
            }
            caches.push(cache);
            h = out;
        }
        let logits = self.output.logits(&h)?;
        if !logits.is_finite() {
            return Err(Error::NonFiniteLayer {
                layer: self.layers.len() + 1,
            });
        }
        Ok(ForwardPass {
            caches,
            top: h,
            logits,
        })
    }

    /// Mean loss and all parameter gradients for a recorded forward pass.
    pub fn backward(&self, pass: &ForwardPass, targets: &Matrix) -> Result<(f64, NetGrads)> {
        let (loss, d_logits) = self.output.head.loss_and_grad(&pass.logits, targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLayer {
                layer: self.layers.len() + 1,
            });
        }
        let output_weights = pass.top.t_matmul(&d_logits)?;
        let output_bias = d_logits.sum_rows();
        let mut upstream = d_logits.matmul_t(&self.output.weights)?;
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&pass.caches).rev() {
            let (d_input, grads) = layer.backward(cache, &upstream)?;
            layer_grads.push(grads);
            upstream = d_input;
        }
        layer_grads.reverse();
        Ok((
            loss,
            NetGrads {
                layers: layer_grads,
                output_weights,
                output_bias,
            },
        ))
    }

    /// Sampled forward pass followed by backward.
    pub fn loss_and_grads(
        &self,
        batch: &Matrix,
        targets: &Matrix,
        levels: &[f64],
        rngs: &mut [RngStream],
    ) -> Result<(f64, NetGrads, ForwardPass)> {
        let pass = self.forward_train(batch, levels, rngs)?;
        let (loss, grads) = self.backward(&pass, targets)?;
        Ok((loss, grads, pass))
    }

    /// Deterministic logits with expected noise and expected masks.
    pub fn forward_infer(&self, batch: &Matrix, levels: &[f64]) -> Result<Matrix> {
        self.check_levels(levels)?;
        let mut h = batch.clone();
        for (i, (layer, &p)) in self.layers.iter().zip(levels).enumerate() {
            h = layer.forward_infer(&h, p)?;
            if !h.is_finite() {
                return Err(Error::NonFiniteLayer { layer: i + 1 });
            }
        }
        self.output.logits(&h)
    }

    /// Parameters in optimizer-slot order: per layer weights, bias,
    /// sharpness (as `1 × units`), projection when present; then the output
    /// weights and bias.
    pub fn parameters(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.clone());
            out.push(l.bias.clone());
            out.push(Matrix::row_vector(l.activation.sharpness.clone()).expect("finite sharpness"));
            if let Adapter::Projection { matrix } = &l.adapter {
                out.push(matrix.clone());
            }
        }
        out.push(self.output.weights.clone());
        out.push(self.output.bias.clone());
        out
    }

    pub fn parameter_shapes(&self) -> Vec<(usize, usize)> {
        self.parameters().iter().map(Matrix::shape).collect()
    }

    /// Writes parameters back in the order of [`MollifiedNet::parameters`].
    pub fn set_parameters(&mut self, params: Vec<Matrix>) -> Result<()> {
        let expected = self.parameter_shapes();
        if params.len() != expected.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter blocks, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&expected) {
            if p.shape() != *s {
                return Err(Error::shapes("set_parameters", *s, p.shape()));
            }
        }
        let mut it = params.into_iter();
        for l in &mut self.layers {
            l.weights = it.next().unwrap();
            l.bias = it.next().unwrap();
            l.activation.sharpness = it.next().unwrap().into_vec();
            if let Adapter::Projection { matrix } = &mut l.adapter {
                *matrix = it.next().unwrap();
            }
        }
        self.output.weights = it.next().unwrap();
        self.output.bias = it.next().unwrap();
        Ok(())
    }

    /// One optimizer update of every parameter.
    pub fn apply_gradients(&mut self, grads: &NetGrads, optimizer: &mut OptimizerState) -> Result<()> {
        let mut params = self.parameters();
        for (slot, (p, g)) in params.iter_mut().zip(grads.flatten()).enumerate() {
            optimizer.step(slot, p, &g)?;
        }
        self.set_parameters(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::HALF_NORMAL_MEAN;

    fn layer(fan_in: usize, fan_out: usize, kind: ActivationKind, seed: u64) -> MollifiedLayer {
        MollifiedLayer::glorot(fan_in, fan_out, kind, 1.0, false, &mut RngStream::new(seed))
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        let data = (0..rows * cols).map(|_| rng.uniform(-1.5, 1.5)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn full_level_is_identity() {
        let l = layer(5, 5, ActivationKind::Sigmoid, 1);
        let h = random_input(4, 5, 2);
        let (out, cache) = l.forward_train(&h, 1.0, &mut RngStream::new(3)).unwrap();
        assert_eq!(out, h);
        assert!(cache.noise.mask.as_slice().iter().all(|&m| m == 1.0));
        assert_eq!(l.forward_infer(&h, 1.0).unwrap(), h);
    }

    #[test]
    fn zero_level_is_noisy_path() {
        let l = layer(3, 4, ActivationKind::Tanh, 4);
        let h = random_input(6, 3, 5);
        let (out, cache) = l.forward_train(&h, 0.0, &mut RngStream::new(6)).unwrap();
        let pre = l.preactivation(&h).unwrap();
        let expected = pre.map(f64::tanh);
        assert!(cache.noise.mask.as_slice().iter().all(|&m| m == 0.0));
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn mask_rate_matches_level() {
        let noise = LayerNoise::sample(100, 100, 0.5, &mut RngStream::new(17));
        let mean = noise.mask.as_slice().iter().sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() <= 3.0 * (0.25_f64 / 1e4).sqrt());
    }

    #[test]
    fn adapters() {
        let h = random_input(3, 2, 9);
        let same = layer(2, 2, ActivationKind::Sigmoid, 1);
        assert_eq!(same.adapt(&h).unwrap(), h);

        let pad = layer(2, 4, ActivationKind::Sigmoid, 1);
        assert_eq!(pad.adapter, Adapter::ZeroPad);
        let padded = pad.adapt(&h).unwrap();
        for r in 0..3 {
            assert_eq!(padded.row(r), &[h.get(r, 0), h.get(r, 1), 0.0, 0.0]);
        }

        let mut proj = layer(2, 2, ActivationKind::Sigmoid, 1);
        proj.adapter = Adapter::Projection {
            matrix: Matrix::identity(2),
        };
        assert_eq!(proj.adapt(&h).unwrap(), h);

        let shrink = layer(4, 2, ActivationKind::Sigmoid, 1);
        assert!(matches!(shrink.adapter, Adapter::Projection { .. }));
        let mut bad = shrink.clone();
        bad.adapter = Adapter::ZeroPad;
        assert!(matches!(
            bad.adapt(&random_input(1, 4, 1)),
            Err(Error::PaddingCannotShrink { fan_in: 4, fan_out: 2 })
        ));
        bad.adapter = Adapter::None;
        assert!(matches!(bad.validate(1), Err(Error::MissingAdapter { .. })));
    }

    #[test]
    fn input_shape_is_checked() {
        let l = layer(3, 3, ActivationKind::Sigmoid, 1);
        assert!(l.forward_train(&Matrix::zeros(2, 4), 0.5, &mut RngStream::new(1)).is_err());
        assert!(l.forward_infer(&Matrix::zeros(2, 2), 0.5).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_uses_expected_noise() {
        let l = layer(4, 4, ActivationKind::Sigmoid, 8);
        let h = random_input(5, 4, 3);
        let a = l.forward_infer(&h, 0.37).unwrap();
        let b = l.forward_infer(&h, 0.37).unwrap();
        assert_eq!(a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let pre = l.preactivation(&h).unwrap();
        let xi = Matrix::filled(5, 4, HALF_NORMAL_MEAN);
        let (psi, _) = l
            .forward_with_noise(&h, 0.37, LayerNoise { xi, mask: Matrix::zeros(5, 4) })
            .unwrap();
        let expected = h.scale(0.37).add(&psi.scale(0.63)).unwrap();
        assert!(a.max_abs_diff(&expected).unwrap() < 1e-15);
        assert_eq!(pre.shape(), a.shape());
    }

    #[test]
    fn inference_without_noise_is_plain_layer() {
        let mut l = layer(4, 4, ActivationKind::Tanh, 8);
        l.activation.c = 0.0;
        let h = random_input(5, 4, 3);
        let plain = l.preactivation(&h).unwrap().map(f64::tanh);
        assert!(l.forward_infer(&h, 0.0).unwrap().max_abs_diff(&plain).unwrap() < 1e-15);
    }

    #[test]
    fn half_normal_mean_against_monte_carlo() {
        let mut rng = RngStream::new(99);
        let n = 1_000_000;
        let mean = (0..n).map(|_| rng.normal().abs()).sum::<f64>() / n as f64;
        assert!((mean - 0.797_884_560_8).abs() < 1e-3);
    }

    #[test]
    fn weight_noise() {
        let mut l = layer(3, 2, ActivationKind::Sigmoid, 5);
        let h = random_input(4, 3, 6);
        let plain = l.preactivation(&h).unwrap().map(crate::numerics::sigmoid);
        let out = l
            .weight_noise_forward(&h, WeightNoiseConfig { mu: 0.0, sigma: 0.0 }, &mut RngStream::new(1))
            .unwrap();
        assert_eq!(out, plain);

        let zero = Matrix::zeros(2, 3);
        let out = l
            .weight_noise_forward(&zero, WeightNoiseConfig { mu: 0.0, sigma: 1.0 }, &mut RngStream::new(1))
            .unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.5));

        assert!(l
            .weight_noise_forward(&h, WeightNoiseConfig { mu: 0.0, sigma: -1.0 }, &mut RngStream::new(1))
            .is_err());

        // identity activation: the mean output approaches (W − μ)·h
        l.activation.kind = ActivationKind::Identity;
        let h1 = random_input(1, 3, 7);
        let cfg = WeightNoiseConfig { mu: 0.2, sigma: 0.5 };
        let mut rng = RngStream::new(12);
        let draws = 10_000;
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        for _ in 0..draws {
            let o = l.weight_noise_forward(&h1, cfg, &mut rng).unwrap();
            for j in 0..2 {
                sum[j] += o.get(0, j);
                sum_sq[j] += o.get(0, j) * o.get(0, j);
            }
        }
        let shifted = l.weights.map(|w| w - 0.2);
        let expected = h1.matmul(&shifted).unwrap();
        for j in 0..2 {
            let mean = sum[j] / draws as f64;
            let var = sum_sq[j] / draws as f64 - mean * mean;
            let se = (var / draws as f64).sqrt();
            assert!((mean - expected.get(0, j)).abs() <= 3.0 * se, "unit {j}: {mean} vs {}", expected.get(0, j));
        }
    }

    #[test]
    fn masked_units_get_no_weight_gradient() {
        let l = layer(4, 6, ActivationKind::Sigmoid, 21);
        let h = random_input(1, 4, 22);
        let (_, cache) = l.forward_train(&h, 0.5, &mut RngStream::new(23)).unwrap();
        let upstream = random_input(1, 6, 24);
        let (_, grads) = l.backward(&cache, &upstream).unwrap();
        let mut saw_masked = false;
        for j in 0..6 {
            if cache.noise.mask.get(0, j) == 1.0 {
                saw_masked = true;
                for i in 0..4 {
                    assert_eq!(grads.weights.get(i, j), 0.0);
                }
                assert_eq!(grads.bias.get(0, j), 0.0);
                assert_eq!(grads.sharpness.get(0, j), 0.0);
            }
        }
        assert!(saw_masked);
    }

    #[test]
    fn head_losses() {
        let z = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let (loss, g) = Head::SigmoidCrossEntropy.loss_and_grad(&z, &y).unwrap();
        let expected = (std::f64::consts::LN_2 + (1.0 + 2.0_f64.exp()).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-14);
        assert!((g.get(0, 0) - (0.5 - 1.0) / 2.0).abs() < 1e-15);

        let z = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let loss = Head::SoftmaxCrossEntropy.loss(&z, &y).unwrap();
        let lse = (1.0_f64.exp() + 2.0_f64.exp() + 3.0_f64.exp()).ln();
        assert!((loss - (lse - 3.0)).abs() < 1e-14);
        assert_eq!(Head::SoftmaxCrossEntropy.accuracy(&z, &y).unwrap(), 1.0);

        let z = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![0.0], vec![3.1]]).unwrap();
        assert!((Head::MeanSquared.loss(&z, &y).unwrap() - (0.5 + 0.005) / 2.0).abs() < 1e-14);
        assert_eq!(Head::MeanSquared.accuracy(&z, &y).unwrap(), 0.5);
    }

    #[test]
    fn non_finite_activations_name_the_layer() {
        let mut net = MollifiedNet::glorot(2, 3, 2, 1, ActivationKind::Identity, Head::MeanSquared, 0.0, false, &mut RngStream::new(1));
        net.layers[1].weights = Matrix::filled(3, 3, 1e300);
        let batch = Matrix::filled(1, 2, 1e10);
        let err = net.forward_infer(&batch, &[0.0, 0.0]).unwrap_err();
        assert_eq!(err, Error::NonFiniteLayer { layer: 2 });
    }

    #[test]
    fn parameters_round_trip() {
        let mut net = MollifiedNet::glorot(5, 3, 2, 2, ActivationKind::Tanh, Head::SoftmaxCrossEntropy, 1.0, false, &mut RngStream::new(4));
        let params = net.parameters();
        // 5 → 3 shrinks, so the first layer carries a projection
        assert_eq!(params.len(), 4 + 3 + 2);
        let copy = net.clone();
        net.set_parameters(params).unwrap();
        assert_eq!(net, copy);
    }
}
