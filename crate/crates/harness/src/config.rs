//! Run configuration.
//!
//! Files are flat UTF-8 `key = value` lines. `#` starts a comment, blank
//! lines are ignored, and unknown keys are errors. Command-line overrides
//! go through the same [`RunConfig::set`] path as file lines.

use std::fmt;
use std::path::PathBuf;

use mollify_core::activations::ActivationKind;
use mollify_core::numerics::{OptimizerConfig, OptimizerKind};
use mollify_core::recurrent::CellKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}` (known keys: {known})")]
    UnknownKey { line: usize, key: String, known: String },
    #[error("line {line}: bad value {value:?} for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Parity,
    ToyRegression,
    SeqCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Mollified,
    Plain,
    ResidualPlain,
}

impl Task {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "parity" => Some(Task::Parity),
            "toy-regression" => Some(Task::ToyRegression),
            "seq-copy" => Some(Task::SeqCopy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Parity => "parity",
            Task::ToyRegression => "toy-regression",
            Task::SeqCopy => "seq-copy",
        }
    }
}

impl Baseline {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "mollified" => Some(Baseline::Mollified),
            "plain" => Some(Baseline::Plain),
            "residual-plain" => Some(Baseline::ResidualPlain),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Mollified => "mollified",
            Baseline::Plain => "plain",
            Baseline::ResidualPlain => "residual-plain",
        }
    }
}

/// Which loss drives the schedule's moving average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnealLoss {
    /// Every minibatch loss, once per update.
    Train,
    /// The validation loss, once per epoch.
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    /// Parity width.
    pub bits: usize,
    /// Generated examples (parity, toy regression) or sequences (seq-copy).
    pub examples: usize,
    pub layers: usize,
    pub hidden: usize,
    pub activation: ActivationKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub rms_decay: f64,
    pub k: f64,
    pub beta: f64,
    /// Window length for a plain moving average; `None` uses the EMA.
    pub average_window: Option<usize>,
    pub anneal_loss: AnnealLoss,
    /// Freezing threshold; `None` means `0.05 · layers`.
    pub delta: Option<f64>,
    pub c: f64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub baseline: Baseline,
    pub out: PathBuf,
    pub valid_fraction: f64,
    pub cell: CellKind,
    pub seq_len: usize,
    pub bptt: usize,
    pub vocab: usize,
    pub delay: usize,
    /// Stop a seed once its train accuracy reaches this value.
    pub target_train_acc: Option<f64>,
    pub record_wall_time: bool,
    pub plot: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        RunConfig {
            task: Task::Parity,
            bits: 8,
            examples: 1000,
            layers: 6,
            hidden: 200,
            activation: ActivationKind::Sigmoid,
            optimizer: opt.kind,
            learning_rate: opt.learning_rate,
            momentum: opt.momentum,
            rms_decay: opt.rms_decay,
            k: 200.0,
            beta: 0.9,
            average_window: None,
            anneal_loss: AnnealLoss::Train,
            delta: None,
            c: 1.0,
            seeds: vec![1, 2, 3, 4, 5],
            epochs: 200,
            batch_size: 32,
            baseline: Baseline::Mollified,
            out: PathBuf::from("runs"),
            valid_fraction: 0.1,
            cell: CellKind::Lstm,
            seq_len: 12,
            bptt: 6,
            vocab: 4,
            delay: 2,
            target_train_acc: None,
            record_wall_time: false,
            plot: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "task",
    "bits",
    "examples",
    "layers",
    "hidden",
    "activation",
    "optimizer",
    "learning_rate",
    "momentum",
    "rms_decay",
    "k",
    "beta",
    "average_window",
    "anneal_loss",
    "delta",
    "c",
    "seeds",
    "epochs",
    "batch_size",
    "baseline",
    "out",
    "valid_fraction",
    "cell",
    "seq_len",
    "bptt",
    "vocab",
    "delay",
    "target_train_acc",
    "record_wall_time",
    "plot",
];

fn parse_num<T: std::str::FromStr>(value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

fn parse_real(value: &str) -> Result<f64, String> {
    let v: f64 = parse_num(value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be a finite number".into())
    }
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_seeds(value: &str) -> Result<Vec<u64>, String> {
    // `a..=b` or a comma list
    if let Some((lo, hi)) = value.split_once("..=") {
        let (lo, hi): (u64, u64) = (parse_num(lo.trim())?, parse_num(hi.trim())?);
        if hi < lo || hi - lo >= 10_000 {
            return Err("seed range must be increasing and shorter than 10000".into());
        }
        return Ok((lo..=hi).collect());
    }
    value.split(',').map(|s| parse_num(s.trim())).collect()
}

fn one_of<T>(parsed: Option<T>, choices: &str) -> Result<T, String> {
    parsed.ok_or_else(|| format!("expected one of {choices}"))
}

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            self.set_at(line, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one override; errors report line 0.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
                known: KEYS.join(", "),
            });
        }
        let result: Result<(), String> = (|| {
            match key {
                "task" => self.task = one_of(Task::parse(value), "parity, toy-regression, seq-copy")?,
                "bits" => self.bits = parse_num(value)?,
                "examples" => self.examples = parse_num(value)?,
                "layers" => self.layers = parse_num(value)?,
                "hidden" => self.hidden = parse_num(value)?,
                "activation" => {
                    self.activation = one_of(ActivationKind::parse(value), "sigmoid, tanh, hard-sigmoid, relu, identity")?
                }
                "optimizer" => {
                    self.optimizer = match value {
                        "sgd-momentum" => OptimizerKind::SgdMomentum,
                        "rmsprop" => OptimizerKind::RmsProp,
                        _ => return Err("expected sgd-momentum or rmsprop".into()),
                    }
                }
                "learning_rate" => self.learning_rate = parse_real(value)?,
                "momentum" => self.momentum = parse_real(value)?,
                "rms_decay" => self.rms_decay = parse_real(value)?,
                "k" => self.k = parse_real(value)?,
                "beta" => self.beta = parse_real(value)?,
                "average_window" => {
                    self.average_window = if value == "none" { None } else { Some(parse_num(value)?) }
                }
                "anneal_loss" => {
                    self.anneal_loss = match value {
                        "train" => AnnealLoss::Train,
                        "valid" => AnnealLoss::Valid,
                        _ => return Err("expected train or valid".into()),
                    }
                }
                "delta" => self.delta = if value == "auto" { None } else { Some(parse_real(value)?) },
                "c" => self.c = parse_real(value)?,
                "seeds" => self.seeds = parse_seeds(value)?,
                "epochs" => self.epochs = parse_num(value)?,
                "batch_size" => self.batch_size = parse_num(value)?,
                "baseline" => self.baseline = one_of(Baseline::parse(value), "mollified, plain, residual-plain")?,
                "out" => {
                    if value.is_empty() {
                        return Err("output directory must not be empty".into());
                    }
                    self.out = PathBuf::from(value)
                }
                "valid_fraction" => self.valid_fraction = parse_real(value)?,
                "cell" => {
                    self.cell = match value {
                        "gru" => CellKind::Gru,
                        "lstm" => CellKind::Lstm,
                        _ => return Err("expected gru or lstm".into()),
                    }
                }
                "seq_len" => self.seq_len = parse_num(value)?,
                "bptt" => self.bptt = parse_num(value)?,
                "vocab" => self.vocab = parse_num(value)?,
                "delay" => self.delay = parse_num(value)?,
                "target_train_acc" => {
                    self.target_train_acc = if value == "none" { None } else { Some(parse_real(value)?) }
                }
                "record_wall_time" => self.record_wall_time = parse_bool(value)?,
                "plot" => self.plot = parse_bool(value)?,
                _ => unreachable!("key list and match arms disagree on `{key}`"),
            }
            Ok(())
        })();
        result.map_err(|reason| ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
            reason,
        })
    }

    /// Layers the annealing schedule tracks; a recurrent model has one level.
    pub fn schedule_layers(&self) -> usize {
        match self.task {
            Task::SeqCopy => 1,
            _ => self.layers,
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or(0.05 * self.schedule_layers() as f64)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            rms_decay: self.rms_decay,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.task == Task::Parity && !(1..=62).contains(&self.bits) {
            return bad("bits must lie in 1..=62");
        }
        if self.examples < 2 {
            return bad("need at least two examples");
        }
        if self.layers == 0 || self.hidden == 0 {
            return bad("layers and hidden must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return bad("valid_fraction must lie in (0, 1)");
        }
        if self.k < 0.0 || self.c < 0.0 {
            return bad("k and c must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1)");
        }
        if self.average_window == Some(0) {
            return bad("average_window must be positive");
        }
        if self.delta() < 0.0 {
            return bad("delta must be non-negative");
        }
        if let Some(a) = self.target_train_acc {
            if !(0.0..=1.0).contains(&a) {
                return bad("target_train_acc must lie in [0, 1]");
            }
        }
        if self.task == Task::SeqCopy && (self.vocab == 0 || self.seq_len == 0 || self.bptt == 0) {
            return bad("seq-copy needs positive vocab, seq_len and bptt");
        }
        if self.task == Task::SeqCopy && self.delay >= self.seq_len {
            return bad("delay must be shorter than seq_len");
        }
        self.optimizer_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical `key = value` rendering; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let opt = match self.optimizer {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::RmsProp => "rmsprop",
        };
        let cell = match self.cell {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        };
        let delta = self.delta.map_or("auto".to_string(), |d| d.to_string());
        let target = self.target_train_acc.map_or("none".to_string(), |a| a.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("task", self.task.name().into()),
            ("bits", self.bits.to_string()),
            ("examples", self.examples.to_string()),
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("activation", self.activation.name().into()),
            ("optimizer", opt.into()),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("rms_decay", self.rms_decay.to_string()),
            ("k", self.k.to_string()),
            ("beta", self.beta.to_string()),
            ("average_window", self.average_window.map_or("none".to_string(), |w| w.to_string())),
            (
                "anneal_loss",
                match self.anneal_loss {
                    AnnealLoss::Train => "train",
                    AnnealLoss::Valid => "valid",
                }
                .into(),
            ),
            ("delta", delta),
            ("c", self.c.to_string()),
            ("seeds", seeds.join(",")),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("baseline", self.baseline.name().into()),
            ("out", self.out.display().to_string()),
            ("valid_fraction", self.valid_fraction.to_string()),
            ("cell", cell.into()),
            ("seq_len", self.seq_len.to_string()),
            ("bptt", self.bptt.to_string()),
            ("vocab", self.vocab.to_string()),
            ("delay", self.delay.to_string()),
            ("target_train_acc", target),
            ("record_wall_time", self.record_wall_time.to_string()),
            ("plot", self.plot.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale_parity() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.bits, cfg.layers, cfg.hidden), (8, 6, 200));
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.momentum, 0.92);
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.epochs, 200);
        assert!((cfg.delta() - 0.3).abs() < 1e-15);
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\nbits = 12  # wider\nbaseline=plain\nseeds = 3..=5\n").unwrap();
        assert_eq!(cfg.bits, 12);
        assert_eq!(cfg.baseline, Baseline::Plain);
        assert_eq!(cfg.seeds, vec![3, 4, 5]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        match RunConfig::parse("bits = 8\nlearnig_rate = 0.1\n") {
            Err(ConfigError::UnknownKey { line, key, .. }) => assert_eq!((line, key.as_str()), (2, "learnig_rate")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("bits = eight"), Err(ConfigError::BadValue { line: 1, .. })));
        assert!(matches!(RunConfig::parse("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("k = NaN"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("task", "seq-copy").unwrap();
        cfg.set("cell", "gru").unwrap();
        cfg.set("delta", "0.7").unwrap();
        cfg.set("target_train_acc", "0.99").unwrap();
        cfg.set("learning_rate", "0.0123").unwrap();
        cfg.set("average_window", "50").unwrap();
        cfg.set("anneal_loss", "valid").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn validation() {
        let base = RunConfig::default();
        let bad = [
            RunConfig { momentum: 1.0, ..base.clone() },
            RunConfig { seeds: vec![], ..base.clone() },
            RunConfig { task: Task::SeqCopy, delay: base.seq_len, ..base.clone() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }
}
