//! First-order optimizers with per-parameter accumulators.
//!
//! Parameters are addressed by slot index; slot `i` owns accumulator `i`,
//! whose shape mirrors parameter `i` exactly.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Denominator guard for RMSProp.
pub const RMSPROP_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    RmsProp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub rms_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 1e-3,
            momentum: 0.92,
            rms_decay: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rms decay must lie in (0, 1), got {}",
                self.rms_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    accumulators: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, shapes: &[(usize, usize)]) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            accumulators: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn accumulator(&self, slot: usize) -> &Matrix {
        &self.accumulators[slot]
    }

    /// Replaces one accumulator, e.g. when resuming from a checkpoint.
    pub fn set_accumulator(&mut self, slot: usize, value: Matrix) -> Result<()> {
        let acc = self
            .accumulators
            .get_mut(slot)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter slot {slot}")))?;
        if acc.shape() != value.shape() {
            return Err(Error::shapes("optimizer accumulator", acc.shape(), value.shape()));
        }
        *acc = value;
        Ok(())
    }

    fn check(&self, slot: usize, params: &Matrix, grad: &Matrix) -> Result<()> {
        let acc = self
            .accumulators
            .get(slot)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter slot {slot}")))?;
        if params.shape() != grad.shape() {
            return Err(Error::shapes("optimizer step", params.shape(), grad.shape()));
        }
        if acc.shape() != params.shape() {
            return Err(Error::shapes("optimizer step", acc.shape(), params.shape()));
        }
        if let Some(index) = grad.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { slot, index });
        }
        Ok(())
    }

    /// Classical momentum: `v ← μv − η·g`, `p ← p + v`.
    pub fn sgd_momentum_step(&mut self, slot: usize, params: &Matrix, grad: &Matrix) -> Result<Matrix> {
        self.check(slot, params, grad)?;
        let OptimizerConfig {
            learning_rate: lr,
            momentum: mu,
            ..
        } = self.config;
        let velocity = &mut self.accumulators[slot];
        let mut out = params.clone();
        for ((p, v), g) in out
            .as_mut_slice()
            .iter_mut()
            .zip(velocity.as_mut_slice())
            .zip(grad.as_slice())
        {
            *v = mu * *v - lr * g;
            *p += *v;
        }
        Ok(out)
    }

    /// `s ← ρs + (1−ρ)g²`, `p ← p − η·g/√(s+ε)`.
    pub fn rmsprop_step(&mut self, slot: usize, params: &Matrix, grad: &Matrix) -> Result<Matrix> {
        self.check(slot, params, grad)?;
        let OptimizerConfig {
            learning_rate: lr,
            rms_decay: rho,
            ..
        } = self.config;
        let sq = &mut self.accumulators[slot];
        let mut out = params.clone();
        for ((p, s), g) in out
            .as_mut_slice()
            .iter_mut()
            .zip(sq.as_mut_slice())
            .zip(grad.as_slice())
        {
            *s = rho * *s + (1.0 - rho) * g * g;
            *p -= lr * g / (*s + RMSPROP_EPSILON).sqrt();
        }
        Ok(out)
    }

    /// Applies the configured rule in place.
    pub fn step(&mut self, slot: usize, params: &mut Matrix, grad: &Matrix) -> Result<()> {
        let updated = match self.config.kind {
            OptimizerKind::SgdMomentum => self.sgd_momentum_step(slot, params, grad)?,
            OptimizerKind::RmsProp => self.rmsprop_step(slot, params, grad)?,
        };
        *params = updated;
        Ok(())
    }
}
