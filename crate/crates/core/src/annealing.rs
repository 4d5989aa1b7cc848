//! Loss-coupled annealing of the per-layer mollification level.
//!
//! `p^l_t = 1 − exp(−k·v_t·l / (t·L))`, where `v_t` is a moving average of the
//! loss, `t ≥ 1` counts optimizer updates and `l ∈ 1..=L` indexes layers from
//! the input. Lower layers therefore lose their noise first. Once the sum
//! `Σ_l p^l_t` falls to `δ` or below the state freezes and every `p` is
//! pinned at zero for the rest of training.
//!
//! The sum is what the literature calls the "expected depth"; it actually
//! counts the expected number of identity-routed layers, hence the name
//! [`AnnealState::expected_skip`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MovingAverage {
    /// `v ← β·v + (1 − β)·loss`; the first observation initialises `v`.
    Exponential { beta: f64 },
    /// Plain mean of the most recent `size` observations.
    Window { size: usize, recent: VecDeque<f64> },
}

impl MovingAverage {
    pub fn exponential(beta: f64) -> Self {
        MovingAverage::Exponential { beta }
    }

    pub fn window(size: usize) -> Self {
        MovingAverage::Window {
            size,
            recent: VecDeque::with_capacity(size),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            MovingAverage::Exponential { beta } if !(0.0..1.0).contains(beta) => Err(
                Error::InvalidArgument(format!("moving-average decay must lie in [0, 1), got {beta}")),
            ),
            MovingAverage::Window { size: 0, .. } => {
                Err(Error::InvalidArgument("moving-average window must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub k: f64,
    pub layers: usize,
    /// Update counter, starting at 1.
    pub t: u64,
    /// Moving average of the loss; `None` until the first observation.
    pub v: Option<f64>,
    pub average: MovingAverage,
    pub delta: f64,
    pub frozen: bool,
}

impl AnnealState {
    pub fn new(k: f64, layers: usize, average: MovingAverage, delta: f64) -> Result<Self> {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::InvalidArgument(format!("k must be finite and non-negative, got {k}")));
        }
        if layers == 0 {
            return Err(Error::InvalidArgument("annealing needs at least one layer".into()));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be non-negative, got {delta}")));
        }
        average.validate()?;
        Ok(AnnealState {
            k,
            layers,
            t: 1,
            v: None,
            average,
            delta,
            frozen: false,
        })
    }

    /// A state whose levels are pinned at zero from the start.
    pub fn disabled(layers: usize) -> Self {
        AnnealState {
            k: 0.0,
            layers: layers.max(1),
            t: 1,
            v: None,
            average: MovingAverage::exponential(0.9),
            delta: 0.0,
            frozen: true,
        }
    }

    /// Level for layer `l` (1-based).
    pub fn schedule_p(&self, l: usize) -> f64 {
        assert!(l >= 1 && l <= self.layers, "layer {l} outside 1..={}", self.layers);
        if self.frozen {
            return 0.0;
        }
        let v = self.v.unwrap_or(0.0);
        let exponent = self.k * v * l as f64 / (self.t as f64 * self.layers as f64);
        // -expm1(-x) = 1 - e^{-x} without cancellation near zero
        let p = -(-exponent).exp_m1();
        if p.is_nan() {
            0.0
        } else {
            p
        }
    }

    /// Levels for layers `1..=L` in order.
    pub fn levels(&self) -> Vec<f64> {
        (1..=self.layers).map(|l| self.schedule_p(l)).collect()
    }

    /// Folds a loss into the moving average without advancing `t`.
    pub fn observe(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "loss fed to the schedule must be finite and non-negative, got {loss}"
            )));
        }
        match &mut self.average {
            MovingAverage::Exponential { beta } => {
                self.v = Some(match self.v {
                    None => loss,
                    Some(v) => *beta * v + (1.0 - *beta) * loss,
                });
            }
            MovingAverage::Window { size, recent } => {
                if recent.len() == *size {
                    recent.pop_front();
                }
                recent.push_back(loss);
                self.v = Some(recent.iter().sum::<f64>() / recent.len() as f64);
            }
        }
        Ok(())
    }

    /// Advances the update counter.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// `v ← β·v + (1 − β)·loss` and `t ← t + 1`.
    pub fn update_loss_average(&mut self, loss: f64) -> Result<()> {
        self.observe(loss)?;
        self.tick();
        Ok(())
    }

    /// `Σ_l p^l`; freezes the state permanently once the sum is at or below `δ`.
    pub fn expected_skip(&mut self) -> f64 {
        if self.frozen {
            return 0.0;
        }
        let total: f64 = self.levels().iter().sum();
        if total <= self.delta {
            self.frozen = true;
        }
        total
    }
}
