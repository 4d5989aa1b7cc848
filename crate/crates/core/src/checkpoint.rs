//! Versioned JSON checkpoints.
//!
//! A checkpoint is one UTF-8 JSON object:
//!
//! ```json
//! {
//!   "format": "mollify-checkpoint",
//!   "version": 1,
//!   "epoch": 3,
//!   "step": 120,
//!   "seed": 1,
//!   "model": { "kind": "feedforward", "layers": [...], "output": {...} },
//!   "anneal": { "k": 1.0, "layers": 6, "t": 121, "v": 0.41, ... },
//!   "optimizer": { "config": {...}, "accumulators": [...] }
//! }
//! ```
//!
//! Matrices are `{"rows": r, "cols": c, "data": [...]}` in row-major order.
//! The optimizer block is optional. Decoding rejects unknown format tags,
//! other versions, inconsistent shapes and non-finite numbers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annealing::{AnnealState, MovingAverage};
use crate::error::{Error, Result};
use crate::net::MollifiedNet;
use crate::numerics::{Matrix, OptimizerConfig, OptimizerState};
use crate::recurrent::RecurrentNet;

pub const FORMAT_TAG: &str = "mollify-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Model {
    Feedforward(MollifiedNet),
    Recurrent(RecurrentNet),
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Feedforward(net) => {
                if net.depth() == 0 {
                    return Err(Error::Checkpoint("feedforward model has no hidden layers".into()));
                }
                net.validate()?;
                for layer in &net.layers {
                    finite_slice("sharpness", &layer.activation.sharpness)?;
                }
                Ok(())
            }
            Model::Recurrent(net) => {
                net.validate()?;
                finite_slice("sharpness", &net.cell.candidate.sharpness)
            }
        }
    }

    /// Number of levels the annealing schedule must provide.
    pub fn schedule_layers(&self) -> usize {
        match self {
            Model::Feedforward(net) => net.depth(),
            Model::Recurrent(_) => 1,
        }
    }

    pub fn parameter_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            Model::Feedforward(net) => net.parameter_shapes(),
            Model::Recurrent(net) => net.parameter_shapes(),
        }
    }
}

fn finite_slice(context: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { context, index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub config: OptimizerConfig,
    pub accumulators: Vec<Matrix>,
}

impl OptimizerSnapshot {
    pub fn capture(state: &OptimizerState, slots: usize) -> Self {
        OptimizerSnapshot {
            config: *state.config(),
            accumulators: (0..slots).map(|i| state.accumulator(i).clone()).collect(),
        }
    }

    pub fn restore(&self) -> Result<OptimizerState> {
        let shapes: Vec<_> = self.accumulators.iter().map(Matrix::shape).collect();
        let mut state = OptimizerState::new(self.config, &shapes)?;
        for (i, acc) in self.accumulators.iter().enumerate() {
            state.set_accumulator(i, acc.clone())?;
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
    pub model: Model,
    pub anneal: AnnealState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn new(model: Model, anneal: AnnealState, epoch: u64, step: u64, seed: u64) -> Self {
        Checkpoint {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            epoch,
            step,
            seed,
            model,
            anneal,
            optimizer: None,
        }
    }

    pub fn with_optimizer(mut self, snapshot: OptimizerSnapshot) -> Self {
        self.optimizer = Some(snapshot);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        validate_anneal(&self.anneal, self.model.schedule_layers())?;
        if let Some(opt) = &self.optimizer {
            opt.config.validate()?;
            let want = self.model.parameter_shapes();
            let got: Vec<_> = opt.accumulators.iter().map(Matrix::shape).collect();
            if want != got {
                return Err(Error::Checkpoint(format!(
                    "optimizer has {} accumulators that do not match the model's {} parameter blocks",
                    got.len(),
                    want.len()
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.encode()?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::decode(&bytes)
    }
}

fn validate_anneal(s: &AnnealState, layers: usize) -> Result<()> {
    let bad = |msg: String| Err(Error::Checkpoint(msg));
    if s.layers != layers {
        return bad(format!("schedule covers {} layers, model has {layers}", s.layers));
    }
    if s.t == 0 {
        return bad("schedule step must start at 1".into());
    }
    if !(s.k >= 0.0 && s.k.is_finite()) || !(s.delta >= 0.0 && s.delta.is_finite()) {
        return bad("schedule constants must be finite and non-negative".into());
    }
    if let Some(v) = s.v {
        if !(v >= 0.0 && v.is_finite()) {
            return bad(format!("loss average {v} is not a finite non-negative number"));
        }
    }
    match &s.average {
        MovingAverage::Exponential { beta } if !(0.0..1.0).contains(beta) => bad(format!("decay {beta} outside [0, 1)")),
        MovingAverage::Window { size, recent } if *size == 0 || recent.len() > *size => {
            bad("window history inconsistent with its size".into())
        }
        MovingAverage::Window { recent, .. } if recent.iter().any(|v| !(*v >= 0.0 && v.is_finite())) => {
            bad("window history holds an invalid loss".into())
        }
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationKind;
    use crate::net::Head;
    use crate::numerics::RngStream;
    use crate::recurrent::CellKind;

    fn feedforward() -> Checkpoint {
        let mut rng = RngStream::new(1);
        let net = MollifiedNet::glorot(4, 6, 3, 1, ActivationKind::Sigmoid, Head::SigmoidCrossEntropy, 1.0, false, &mut rng);
        let anneal = AnnealState::new(2.0, 3, MovingAverage::exponential(0.9), 0.15).unwrap();
        Checkpoint::new(Model::Feedforward(net), anneal, 0, 0, 1)
    }

    #[test]
    fn round_trip_is_lossless() {
        let ck = feedforward();
        let back = Checkpoint::decode(ck.encode().unwrap().as_bytes()).unwrap();
        assert_eq!(back, ck);

        let mut rng = RngStream::new(2);
        let rnn = RecurrentNet::glorot(CellKind::Lstm, 3, 4, 5, 1.0, &mut rng);
        let mut anneal = AnnealState::new(1.0, 1, MovingAverage::window(3), 0.05).unwrap();
        anneal.update_loss_average(0.7).unwrap();
        let ck = Checkpoint::new(Model::Recurrent(rnn), anneal, 2, 40, 9);
        let back = Checkpoint::decode(ck.encode().unwrap().as_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn optimizer_state_survives() {
        let ck = feedforward();
        let Model::Feedforward(net) = &ck.model else { unreachable!() };
        let shapes = net.parameter_shapes();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &shapes).unwrap();
        let mut p = net.parameters()[0].clone();
        let g = Matrix::filled(p.rows(), p.cols(), 0.5);
        opt.step(0, &mut p, &g).unwrap();
        let ck = ck.with_optimizer(OptimizerSnapshot::capture(&opt, shapes.len()));
        let back = Checkpoint::decode(ck.encode().unwrap().as_bytes()).unwrap();
        let restored = back.optimizer.unwrap().restore().unwrap();
        assert_eq!(restored.accumulator(0), opt.accumulator(0));
    }

    #[test]
    fn rejects_bad_payloads() {
        let text = feedforward().encode().unwrap();
        assert!(Checkpoint::decode(b"").is_err());
        assert!(Checkpoint::decode(b"{}").is_err());
        assert!(Checkpoint::decode(text.replace("\"version\":1", "\"version\":2").as_bytes()).is_err());
        assert!(Checkpoint::decode(text.replace("mollify-checkpoint", "other").as_bytes()).is_err());
        // short matrix data
        let broken = text.replacen("\"rows\":4", "\"rows\":5", 1);
        assert!(matches!(Checkpoint::decode(broken.as_bytes()), Err(Error::DataLength { .. })
            | Err(Error::Checkpoint(_))));
        let mut ck = feedforward();
        ck.anneal.layers = 2;
        assert!(Checkpoint::decode(ck.encode().unwrap().as_bytes()).is_err());
        let mut ck = feedforward();
        if let Model::Feedforward(net) = &mut ck.model {
            net.layers[1].bias = Matrix::zeros(1, 3);
        }
        assert!(Checkpoint::decode(ck.encode().unwrap().as_bytes()).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = std::env::temp_dir().join(format!("mollify-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let ck = feedforward();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
