//! Mollified GRU and LSTM cells.
//!
//! Scheduled gates use the hard sigmoid `f` and a pseudo-input that pulls
//! their expected value toward a target `γ`:
//!
//! ```text
//! ī(x) = (f⁻¹(γ) − x) / E|ξ|,    f⁻¹(y) = 4(y − 0.5)
//! g    = f(x + p·ī(x)·|ξ|)
//! ```
//!
//! With `p = 0` the gate is the plain hard sigmoid; with `p = 1` its mean is
//! close to `γ` whenever `x + ī(x)·|ξ|` stays inside the linear region of
//! `f`. Gate targets follow the annealing step `t`: GRU update `1/t`, reset
//! `1`; LSTM input `1/t`, forget `1 − 1/t`, output `1`. Candidates use the
//! noisy tanh from [`crate::activations`].
//!
//! GRU convention: `h' = (1 − z)⊙h + z⊙h̃`.

use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, MollifiedActivation, NoiseRealization};
use crate::error::{Error, Result};
use crate::net::{Head, OutputLayer};
use crate::numerics::{Matrix, OptimizerState, RngStream, HALF_NORMAL_MEAN};

const GATE: ActivationKind = ActivationKind::HardSigmoid;

#[inline]
fn hard_sigmoid_inverse(y: f64) -> f64 {
    4.0 * (y - 0.5)
}

fn check_target(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "gate target {gamma} outside the range [0, 1] of the hard sigmoid"
        )));
    }
    Ok(())
}

/// `ī(x) = (4(γ − 0.5) − x) / √(2/π)` elementwise.
pub fn gate_pseudo_input(x: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_target(gamma)?;
    let target = hard_sigmoid_inverse(gamma);
    Ok(x.iter().map(|&v| (target - v) / HALF_NORMAL_MEAN).collect())
}

/// Gate value at a given `|ξ|`, and its derivative in `x`.
#[inline]
fn gate_unit(x: f64, gamma: Option<f64>, p: f64, abs_xi: f64) -> (f64, f64) {
    match gamma {
        None => (GATE.eval(x), GATE.derivative(x)),
        Some(g) => {
            let k = p * abs_xi / HALF_NORMAL_MEAN;
            let z = x + k * (hard_sigmoid_inverse(g) - x);
            (GATE.eval(z), GATE.derivative(z) * (1.0 - k))
        }
    }
}

/// Samples `ξ` per unit and returns `f(x + p·ī(x)·|ξ|)`.
pub fn mollified_gate(x: &[f64], gamma: f64, p: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    check_target(gamma)?;
    Ok(x.iter()
        .map(|&v| gate_unit(v, Some(gamma), p, rng.normal().abs()).0)
        .collect())
}

/// Inference form of the gate, `f(x + p·ī(x)·√(2/π))`.
pub fn expected_gate(x: &[f64], gamma: f64, p: f64) -> Result<Vec<f64>> {
    check_target(gamma)?;
    Ok(x.iter()
        .map(|&v| gate_unit(v, Some(gamma), p, HALF_NORMAL_MEAN).0)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateRole {
    ConstantOne,
    InverseTime,
    OneMinusInverseTime,
    /// Ordinary learned gate, no pseudo-input.
    Free,
}

impl GateRole {
    /// Target at annealing step `t ≥ 1`; `None` for free gates.
    pub fn target(self, t: u64) -> Option<f64> {
        let t = t.max(1) as f64;
        match self {
            GateRole::ConstantOne => Some(1.0),
            GateRole::InverseTime => Some(1.0 / t),
            GateRole::OneMinusInverseTime => Some(1.0 - 1.0 / t),
            GateRole::Free => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    /// Scheduled gates in storage order, followed by the candidate.
    pub fn default_roles(self) -> Vec<GateRole> {
        match self {
            // update, reset
            CellKind::Gru => vec![GateRole::InverseTime, GateRole::ConstantOne],
            // input, forget, output
            CellKind::Lstm => vec![
                GateRole::InverseTime,
                GateRole::OneMinusInverseTime,
                GateRole::ConstantOne,
            ],
        }
    }

    pub fn gate_count(self) -> usize {
        match self {
            CellKind::Gru => 2,
            CellKind::Lstm => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    /// `input_dim × hidden`.
    pub input: Matrix,
    /// `hidden × hidden`.
    pub recurrent: Matrix,
    /// `1 × hidden`.
    pub bias: Matrix,
}

impl GateWeights {
    fn glorot(input_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let lim_in = (6.0 / (input_dim + hidden) as f64).sqrt();
        let lim_rec = (6.0 / (2 * hidden) as f64).sqrt();
        let input = Matrix::from_vec(
            input_dim,
            hidden,
            (0..input_dim * hidden).map(|_| rng.uniform(-lim_in, lim_in)).collect(),
        )
        .expect("finite");
        let recurrent = Matrix::from_vec(
            hidden,
            hidden,
            (0..hidden * hidden).map(|_| rng.uniform(-lim_rec, lim_rec)).collect(),
        )
        .expect("finite");
        GateWeights {
            input,
            recurrent,
            bias: Matrix::zeros(1, hidden),
        }
    }

    fn zeros_like(&self) -> Self {
        GateWeights {
            input: Matrix::zeros(self.input.rows(), self.input.cols()),
            recurrent: Matrix::zeros(self.recurrent.rows(), self.recurrent.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }

    fn preactivation(&self, x: &Matrix, h: &Matrix) -> Result<Matrix> {
        let mut a = x.matmul(&self.input)?;
        a.add_assign(&h.matmul(&self.recurrent)?)?;
        a.add_row_broadcast(&self.bias)?;
        Ok(a)
    }

    /// Accumulates parameter gradients for pre-activation gradient `da` and
    /// returns `da·Uᵀ`.
    fn accumulate(&self, grads: &mut GateWeights, x: &Matrix, h: &Matrix, da: &Matrix) -> Result<Matrix> {
        grads.input.add_assign(&x.t_matmul(da)?)?;
        grads.recurrent.add_assign(&h.t_matmul(da)?)?;
        grads.bias.add_assign(&da.sum_rows())?;
        da.matmul_t(&self.recurrent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollifiedCell {
    pub kind: CellKind,
    /// Scheduled gates (GRU: update, reset; LSTM: input, forget, output).
    pub gates: Vec<GateWeights>,
    pub roles: Vec<GateRole>,
    pub candidate_weights: GateWeights,
    /// Noisy tanh for the candidate.
    pub candidate: MollifiedActivation,
}

/// Sampled noise for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub gate_xi: Vec<Matrix>,
    pub candidate_xi: Matrix,
}

impl StepNoise {
    pub fn sample(gates: usize, batch: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut draw = || {
            let mut m = Matrix::zeros(batch, hidden);
            for v in m.as_mut_slice() {
                *v = rng.normal();
            }
            m
        };
        let gate_xi = (0..gates).map(|_| draw()).collect();
        let candidate_xi = draw();
        StepNoise { gate_xi, candidate_xi }
    }
}

#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Matrix,
    pub gate_pre: Vec<Matrix>,
    pub gate_val: Vec<Matrix>,
    pub gate_slope: Vec<Matrix>,
    /// GRU: `r ⊙ h_prev`; unused for LSTM.
    pub reset_hidden: Matrix,
    pub cand_pre: Matrix,
    pub cand_val: Matrix,
    pub cand_noise: Vec<NoiseRealization>,
    pub c: Matrix,
    pub h: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellGrads {
    pub gates: Vec<GateWeights>,
    pub candidate_weights: GateWeights,
    pub sharpness: Matrix,
}

impl MollifiedCell {
    pub fn glorot(kind: CellKind, input_dim: usize, hidden: usize, c: f64, rng: &mut RngStream) -> Self {
        let gates = (0..kind.gate_count())
            .map(|_| GateWeights::glorot(input_dim, hidden, rng))
            .collect();
        let candidate_weights = GateWeights::glorot(input_dim, hidden, rng);
        let candidate = MollifiedActivation::with_random_sharpness(ActivationKind::Tanh, hidden, c, rng);
        MollifiedCell {
            kind,
            gates,
            roles: kind.default_roles(),
            candidate_weights,
            candidate,
        }
    }

    pub fn hidden(&self) -> usize {
        self.candidate_weights.bias.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.candidate_weights.input.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.input_dim(), self.hidden());
        if self.gates.len() != self.kind.gate_count() || self.roles.len() != self.kind.gate_count() {
            return Err(Error::InvalidArgument(format!(
                "{:?} cell needs {} gates and roles",
                self.kind,
                self.kind.gate_count()
            )));
        }
        for g in self.gates.iter().chain(std::iter::once(&self.candidate_weights)) {
            if g.input.shape() != (d, h) {
                return Err(Error::shapes("gate input weights", (d, h), g.input.shape()));
            }
            if g.recurrent.shape() != (h, h) {
                return Err(Error::shapes("gate recurrent weights", (h, h), g.recurrent.shape()));
            }
            if g.bias.shape() != (1, h) {
                return Err(Error::shapes("gate bias", (1, h), g.bias.shape()));
            }
        }
        if self.candidate.units() != h {
            return Err(Error::shapes("candidate sharpness", (1, h), (1, self.candidate.units())));
        }
        if self.candidate.kind != ActivationKind::Tanh {
            return Err(Error::InvalidArgument("recurrent candidates use tanh".into()));
        }
        if !(self.candidate.c >= 0.0 && self.candidate.c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise constant must be non-negative, got {}",
                self.candidate.c
            )));
        }
        Ok(())
    }

    fn check_state(&self, x: &Matrix, h: &Matrix, c: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shapes("cell input", x.shape(), self.candidate_weights.input.shape()));
        }
        let want = (x.rows(), self.hidden());
        if h.shape() != want {
            return Err(Error::shapes("cell hidden state", want, h.shape()));
        }
        if self.kind == CellKind::Lstm && c.shape() != want {
            return Err(Error::shapes("cell memory", want, c.shape()));
        }
        Ok(())
    }

    fn gates_at(&self, pre: &Matrix, gamma: Option<f64>, p: f64, xi: Option<&Matrix>) -> (Matrix, Matrix) {
        let mut val = Matrix::zeros(pre.rows(), pre.cols());
        let mut slope = Matrix::zeros(pre.rows(), pre.cols());
        for i in 0..pre.len() {
            let abs_xi = xi.map_or(HALF_NORMAL_MEAN, |m| m.as_slice()[i].abs());
            let (v, d) = gate_unit(pre.as_slice()[i], gamma, p, abs_xi);
            val.as_mut_slice()[i] = v;
            slope.as_mut_slice()[i] = d;
        }
        (val, slope)
    }

    /// One step at a given noise draw (`None` selects the inference form).
    /// For a GRU `c_prev` is ignored and the returned memory is empty.
    pub fn step_with_noise(
        &self,
        x: &Matrix,
        h_prev: &Matrix,
        c_prev: &Matrix,
        p: f64,
        t: u64,
        noise: Option<&StepNoise>,
    ) -> Result<StepCache> {
        self.check_state(x, h_prev, c_prev)?;
        let n = self.kind.gate_count();
        let mut gate_pre = Vec::with_capacity(n);
        let mut gate_val = Vec::with_capacity(n);
        let mut gate_slope = Vec::with_capacity(n);
        for (i, (w, role)) in self.gates.iter().zip(&self.roles).enumerate() {
            let pre = w.preactivation(x, h_prev)?;
            let (val, slope) = self.gates_at(&pre, role.target(t), p, noise.map(|s| &s.gate_xi[i]));
            gate_pre.push(pre);
            gate_val.push(val);
            gate_slope.push(slope);
        }

        let reset_hidden = match self.kind {
            CellKind::Gru => gate_val[1].hadamard(h_prev)?,
            CellKind::Lstm => h_prev.clone(),
        };
        let mut cand_pre = x.matmul(&self.candidate_weights.input)?;
        cand_pre.add_assign(&reset_hidden.matmul(&self.candidate_weights.recurrent)?)?;
        cand_pre.add_row_broadcast(&self.candidate_weights.bias)?;

        let mut cand_val = Matrix::zeros(cand_pre.rows(), cand_pre.cols());
        let mut cand_noise = Vec::with_capacity(cand_pre.rows());
        for r in 0..cand_pre.rows() {
            let row = match noise {
                Some(s) => {
                    let (v, real) = self
                        .candidate
                        .noisy_activation_frozen(cand_pre.row(r), p, s.candidate_xi.row(r).to_vec())?;
                    cand_noise.push(real);
                    v
                }
                None => self.candidate.expected_activation(cand_pre.row(r), p)?,
            };
            cand_val.row_mut(r).copy_from_slice(&row);
        }

        let (c, h) = match self.kind {
            CellKind::Gru => {
                let z = &gate_val[0];
                let h = h_prev.zip_map(z, |hp, zv| (1.0 - zv) * hp)?.add(&z.hadamard(&cand_val)?)?;
                (Matrix::zeros(0, 0), h)
            }
            CellKind::Lstm => {
                let c = gate_val[1].hadamard(c_prev)?.add(&gate_val[0].hadamard(&cand_val)?)?;
                let h = gate_val[2].zip_map(&c, |o, cv| o * cv.tanh())?;
                (c, h)
            }
        };
        Ok(StepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            gate_pre,
            gate_val,
            gate_slope,
            reset_hidden,
            cand_pre,
            cand_val,
            cand_noise,
            c,
            h,
        })
    }

    /// Sampled GRU step.
    pub fn gru_step(&self, x: &Matrix, h_prev: &Matrix, p: f64, t: u64, rng: &mut RngStream) -> Result<Matrix> {
        if self.kind != CellKind::Gru {
            return Err(Error::InvalidArgument("gru_step on an LSTM cell".into()));
        }
        let noise = StepNoise::sample(self.kind.gate_count(), x.rows(), self.hidden(), rng);
        Ok(self.step_with_noise(x, h_prev, &Matrix::zeros(0, 0), p, t, Some(&noise))?.h)
    }

    /// Sampled LSTM step, returning `(h, c)`.
    pub fn lstm_step(
        &self,
        x: &Matrix,
        h_prev: &Matrix,
        c_prev: &Matrix,
        p: f64,
        t: u64,
        rng: &mut RngStream,
    ) -> Result<(Matrix, Matrix)> {
        if self.kind != CellKind::Lstm {
            return Err(Error::InvalidArgument("lstm_step on a GRU cell".into()));
        }
        let noise = StepNoise::sample(self.kind.gate_count(), x.rows(), self.hidden(), rng);
        let cache = self.step_with_noise(x, h_prev, c_prev, p, t, Some(&noise))?;
        Ok((cache.h, cache.c))
    }

    pub fn zero_grads(&self) -> CellGrads {
        CellGrads {
            gates: self.gates.iter().map(GateWeights::zeros_like).collect(),
            candidate_weights: self.candidate_weights.zeros_like(),
            sharpness: Matrix::zeros(1, self.hidden()),
        }
    }

    /// Backpropagates one step. `dh` and `dc` are gradients with respect to
    /// the step's outputs; returns gradients with respect to `h_prev` and
    /// `c_prev`.
    pub fn step_backward(
        &self,
        cache: &StepCache,
        dh: &Matrix,
        dc: &Matrix,
        grads: &mut CellGrads,
    ) -> Result<(Matrix, Matrix)> {
        let (batch, hidden) = cache.h.shape();
        if dh.shape() != (batch, hidden) {
            return Err(Error::shapes("step backward", (batch, hidden), dh.shape()));
        }
        let mut d_gate = Vec::with_capacity(self.gates.len());
        let d_cand;
        let mut dh_prev;
        let mut dc_prev = Matrix::zeros(0, 0);
        match self.kind {
            CellKind::Gru => {
                let z = &cache.gate_val[0];
                let dz = dh.hadamard(&cache.cand_val.sub(&cache.h_prev)?)?;
                d_cand = dh.hadamard(z)?;
                dh_prev = dh.zip_map(z, |g, zv| g * (1.0 - zv))?;
                d_gate.push(dz);
            }
            CellKind::Lstm => {
                let o = &cache.gate_val[2];
                let tc = cache.c.map(f64::tanh);
                let d_o = dh.hadamard(&tc)?;
                let mut dct = dh.hadamard(o)?.zip_map(&tc, |g, t| g * (1.0 - t * t))?;
                if dc.shape() == dct.shape() {
                    dct.add_assign(dc)?;
                }
                d_gate.push(dct.hadamard(&cache.cand_val)?);
                d_gate.push(dct.hadamard(&cache.c_prev)?);
                d_gate.push(d_o);
                d_cand = dct.hadamard(&cache.gate_val[0])?;
                dc_prev = dct.hadamard(&cache.gate_val[1])?;
                dh_prev = Matrix::zeros(batch, hidden);
            }
        }

        // candidate
        let mut da_cand = Matrix::zeros(batch, hidden);
        for r in 0..batch {
            let (gx, ga) = self
                .candidate
                .backward(&cache.cand_noise[r], cache.cand_pre.row(r), d_cand.row(r))?;
            da_cand.row_mut(r).copy_from_slice(&gx);
            for (acc, g) in grads.sharpness.as_mut_slice().iter_mut().zip(&ga) {
                *acc += g;
            }
        }
        let d_reset_hidden =
            self.candidate_weights
                .accumulate(&mut grads.candidate_weights, &cache.x, &cache.reset_hidden, &da_cand)?;
        match self.kind {
            CellKind::Gru => {
                let r = &cache.gate_val[1];
                d_gate.push(d_reset_hidden.hadamard(&cache.h_prev)?);
                dh_prev.add_assign(&d_reset_hidden.hadamard(r)?)?;
            }
            CellKind::Lstm => dh_prev.add_assign(&d_reset_hidden)?,
        }

        for (i, w) in self.gates.iter().enumerate() {
            let da = d_gate[i].hadamard(&cache.gate_slope[i])?;
            let back = w.accumulate(&mut grads.gates[i], &cache.x, &cache.h_prev, &da)?;
            dh_prev.add_assign(&back)?;
        }
        Ok((dh_prev, dc_prev))
    }
}

/// Recurrent cell with a softmax read-out at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentNet {
    pub cell: MollifiedCell,
    pub output: OutputLayer,
}

/// Forward record of a (chunk of a) sequence.
#[derive(Debug, Clone)]
pub struct SequencePass {
    pub steps: Vec<StepCache>,
    pub logits: Vec<Matrix>,
    pub noise: Vec<StepNoise>,
}

impl SequencePass {
    pub fn final_state(&self) -> (Matrix, Matrix) {
        let last = self.steps.last().expect("non-empty sequence");
        (last.h.clone(), last.c.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentGrads {
    pub cell: CellGrads,
    pub output_weights: Matrix,
    pub output_bias: Matrix,
}

impl RecurrentGrads {
    pub fn flatten(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for g in self.cell.gates.iter().chain(std::iter::once(&self.cell.candidate_weights)) {
            out.push(g.input.clone());
            out.push(g.recurrent.clone());
            out.push(g.bias.clone());
        }
        out.push(self.cell.sharpness.clone());
        out.push(self.output_weights.clone());
        out.push(self.output_bias.clone());
        out
    }
}

impl RecurrentNet {
    pub fn glorot(kind: CellKind, input_dim: usize, hidden: usize, classes: usize, c: f64, rng: &mut RngStream) -> Self {
        let cell = MollifiedCell::glorot(kind, input_dim, hidden, c, rng);
        let output = OutputLayer::glorot(hidden, classes, Head::SoftmaxCrossEntropy, rng);
        RecurrentNet { cell, output }
    }

    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        let h = self.cell.hidden();
        if self.output.weights.rows() != h {
            return Err(Error::shapes("read-out", (h, self.output.weights.cols()), self.output.weights.shape()));
        }
        if self.output.bias.shape() != (1, self.output.weights.cols()) {
            return Err(Error::shapes("read-out bias", (1, self.output.weights.cols()), self.output.bias.shape()));
        }
        Ok(())
    }

    /// Zero initial `(h, c)` for a batch.
    pub fn initial_state(&self, batch: usize) -> (Matrix, Matrix) {
        let h = Matrix::zeros(batch, self.cell.hidden());
        let c = match self.cell.kind {
            CellKind::Gru => Matrix::zeros(0, 0),
            CellKind::Lstm => Matrix::zeros(batch, self.cell.hidden()),
        };
        (h, c)
    }

    pub fn forward_train(
        &self,
        inputs: &[Matrix],
        state: (Matrix, Matrix),
        p: f64,
        t: u64,
        rng: &mut RngStream,
    ) -> Result<SequencePass> {
        let hidden = self.cell.hidden();
        let noise = inputs
            .iter()
            .map(|x| StepNoise::sample(self.cell.kind.gate_count(), x.rows(), hidden, rng))
            .collect();
        self.forward_with_noise(inputs, state, p, t, noise)
    }

    pub fn forward_with_noise(
        &self,
        inputs: &[Matrix],
        state: (Matrix, Matrix),
        p: f64,
        t: u64,
        noise: Vec<StepNoise>,
    ) -> Result<SequencePass> {
        if inputs.is_empty() || noise.len() != inputs.len() {
            return Err(Error::InvalidArgument("one noise record per time step required".into()));
        }
        let (mut h, mut c) = state;
        let mut steps = Vec::with_capacity(inputs.len());
        let mut logits = Vec::with_capacity(inputs.len());
        for (x, n) in inputs.iter().zip(&noise) {
            let cache = self.cell.step_with_noise(x, &h, &c, p, t, Some(n))?;
            if !cache.h.is_finite() {
                return Err(Error::NonFiniteLayer { layer: 1 });
            }
            logits.push(self.output.logits(&cache.h)?);
            h = cache.h.clone();
            c = cache.c.clone();
            steps.push(cache);
        }
        Ok(SequencePass { steps, logits, noise })
    }

    /// Deterministic logits and final state.
    pub fn forward_infer(
        &self,
        inputs: &[Matrix],
        state: (Matrix, Matrix),
        p: f64,
        t: u64,
    ) -> Result<(Vec<Matrix>, (Matrix, Matrix))> {
        let (mut h, mut c) = state;
        let mut logits = Vec::with_capacity(inputs.len());
        for x in inputs {
            let cache = self.cell.step_with_noise(x, &h, &c, p, t, None)?;
            logits.push(self.output.logits(&cache.h)?);
            h = cache.h;
            c = cache.c;
        }
        Ok((logits, (h, c)))
    }

    /// Mean over steps of the per-step cross-entropy.
    pub fn sequence_loss(&self, logits: &[Matrix], targets: &[Matrix]) -> Result<f64> {
        if logits.len() != targets.len() || logits.is_empty() {
            return Err(Error::InvalidArgument("one target per time step required".into()));
        }
        let mut total = 0.0;
        for (z, y) in logits.iter().zip(targets) {
            total += self.output.head.loss(z, y)?;
        }
        Ok(total / logits.len() as f64)
    }

    /// Backpropagation through the recorded chunk; gradients do not flow
    /// into the chunk's initial state.
    pub fn backward(&self, pass: &SequencePass, targets: &[Matrix]) -> Result<(f64, RecurrentGrads)> {
        if targets.len() != pass.steps.len() {
            return Err(Error::InvalidArgument("one target per time step required".into()));
        }
        let steps = pass.steps.len() as f64;
        let mut grads = self.cell.zero_grads();
        let mut d_out_w = Matrix::zeros(self.output.weights.rows(), self.output.weights.cols());
        let mut d_out_b = Matrix::zeros(1, self.output.weights.cols());
        let mut total = 0.0;
        let (batch, hidden) = pass.steps[0].h.shape();
        let mut dh_next = Matrix::zeros(batch, hidden);
        let mut dc_next = Matrix::zeros(0, 0);
        for i in (0..pass.steps.len()).rev() {
            let cache = &pass.steps[i];
            let (loss, d_logits) = self.output.head.loss_and_grad(&pass.logits[i], &targets[i])?;
            total += loss;
            let d_logits = d_logits.scale(1.0 / steps);
            d_out_w.add_assign(&cache.h.t_matmul(&d_logits)?)?;
            d_out_b.add_assign(&d_logits.sum_rows())?;
            let mut dh = d_logits.matmul_t(&self.output.weights)?;
            dh.add_assign(&dh_next)?;
            let (dh_prev, dc_prev) = self.cell.step_backward(cache, &dh, &dc_next, &mut grads)?;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        let loss = total / steps;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLayer { layer: 2 });
        }
        Ok((
            loss,
            RecurrentGrads {
                cell: grads,
                output_weights: d_out_w,
                output_bias: d_out_b,
            },
        ))
    }

    /// Parameters in optimizer-slot order: for each scheduled gate then the
    /// candidate, input/recurrent/bias; then candidate sharpness; then the
    /// read-out weights and bias.
    pub fn parameters(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for g in self.cell.gates.iter().chain(std::iter::once(&self.cell.candidate_weights)) {
            out.push(g.input.clone());
            out.push(g.recurrent.clone());
            out.push(g.bias.clone());
        }
        out.push(Matrix::row_vector(self.cell.candidate.sharpness.clone()).expect("finite sharpness"));
        out.push(self.output.weights.clone());
        out.push(self.output.bias.clone());
        out
    }

    pub fn parameter_shapes(&self) -> Vec<(usize, usize)> {
        self.parameters().iter().map(Matrix::shape).collect()
    }

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
        let cell = &mut self.cell;
        for g in cell.gates.iter_mut().chain(std::iter::once(&mut cell.candidate_weights)) {
            g.input = it.next().unwrap();
            g.recurrent = it.next().unwrap();
            g.bias = it.next().unwrap();
        }
        cell.candidate.sharpness = it.next().unwrap().into_vec();
        self.output.weights = it.next().unwrap();
        self.output.bias = it.next().unwrap();
        Ok(())
    }

    pub fn apply_gradients(&mut self, grads: &RecurrentGrads, optimizer: &mut OptimizerState) -> Result<()> {
        let mut params = self.parameters();
        for (slot, (p, g)) in params.iter_mut().zip(grads.flatten()).enumerate() {
            optimizer.step(slot, p, &g)?;
        }
        self.set_parameters(params)
    }
}
