//! Experiment driver.
//!
//! Output layout under `cfg.out`:
//!
//! ```text
//! config.txt            canonical configuration
//! seed-<n>/metrics.csv  one row per epoch
//! seed-<n>/checkpoint.json
//! aggregate.csv         per-epoch medians across seeds
//! curves.svg            when `plot = true`
//! ```
//!
//! Random streams per seed: dataset 0, split 1, initialisation 2, batch
//! order 3, noise 10 + layer.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mollify_core::annealing::{AnnealState, MovingAverage};
use mollify_core::checkpoint::{Checkpoint, Model, OptimizerSnapshot};
use mollify_core::net::{Head, MollifiedNet};
use mollify_core::numerics::{Matrix, OptimizerState, RngStream};
use mollify_core::recurrent::RecurrentNet;

use crate::config::{AnnealLoss, Baseline, ConfigError, RunConfig, Task};
use crate::metrics::{self, MetricsRow};
use crate::plot;
use crate::tasks::{self, Dataset, SequenceDataset};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("seed {seed} diverged at epoch {epoch}, step {step}: {reason}; last good checkpoint kept at {checkpoint}")]
    Diverged {
        seed: u64,
        epoch: u64,
        step: u64,
        reason: String,
        checkpoint: PathBuf,
    },
    #[error(transparent)]
    Model(#[from] mollify_core::Error),
    #[error(transparent)]
    Plot(#[from] plot::PlotError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub dir: PathBuf,
}

impl SeedReport {
    /// First epoch whose train accuracy reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.train_acc >= threshold).map(|r| r.epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seeds: Vec<SeedReport>,
    pub aggregate: PathBuf,
}

/// Runs every configured seed, then writes the aggregate.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    write(&cfg.out.join("config.txt"), &cfg.to_text())?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seeds.push(run_seed(cfg, seed)?);
    }
    let layers = cfg.schedule_layers();
    let runs: Vec<Vec<MetricsRow>> = seeds.iter().map(|s| s.rows.clone()).collect();
    let aggregate = cfg.out.join("aggregate.csv");
    let text = metrics::render(layers, &metrics::aggregate(layers, &runs));
    write(&aggregate, &text)?;
    if cfg.plot && !runs.iter().all(Vec::is_empty) {
        let svg = plot::emit_plot(&text, &["train_loss", "valid_loss"])?;
        write(&cfg.out.join("curves.svg"), &svg)?;
    }
    Ok(RunSummary { seeds, aggregate })
}

fn new_schedule(cfg: &RunConfig) -> Result<AnnealState, RunError> {
    let layers = cfg.schedule_layers();
    Ok(match cfg.baseline {
        Baseline::Mollified => {
            let average = match cfg.average_window {
                Some(n) => MovingAverage::window(n),
                None => MovingAverage::exponential(cfg.beta),
            };
            AnnealState::new(cfg.k, layers, average, cfg.delta())?
        }
        Baseline::Plain | Baseline::ResidualPlain => AnnealState::disabled(layers),
    })
}

fn noise_constant(cfg: &RunConfig) -> f64 {
    match cfg.baseline {
        Baseline::Mollified => cfg.c,
        _ => 0.0,
    }
}

/// What a training step can fail with, before it is tied to a seed.
enum StepError {
    Diverged(String),
    Model(mollify_core::Error),
}

impl From<mollify_core::Error> for StepError {
    fn from(e: mollify_core::Error) -> Self {
        use mollify_core::Error as E;
        match e {
            E::NonFinite { .. } | E::NonFiniteGradient { .. } | E::NonFiniteLayer { .. } => {
                StepError::Diverged(e.to_string())
            }
            other => StepError::Model(other),
        }
    }
}

fn check_loss(loss: f64) -> Result<f64, StepError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(StepError::Diverged(format!("loss became {loss}")))
    }
}

/// Model-specific training state.
trait Trainer {
    fn model(&self) -> Model;
    fn parameter_count(&self) -> usize;
    fn optimizer(&self) -> &OptimizerState;
    fn schedule(&self) -> &AnnealState;
    fn schedule_mut(&mut self) -> &mut AnnealState;
    /// Plain-network `(train, valid)` losses, used to seed the loss average.
    fn initial_losses(&self) -> Result<(f64, f64), StepError>;
    /// One pass over the training data; returns the number of updates.
    fn epoch(&mut self) -> Result<u64, StepError>;
    /// `(train_loss, train_acc, valid_loss, valid_acc)` at current levels.
    fn evaluate(&self) -> Result<(f64, f64, f64, f64), StepError>;
}

fn anneal_update(s: &mut AnnealState, loss: f64, source: AnnealLoss) -> Result<(), StepError> {
    match source {
        AnnealLoss::Train => s.update_loss_average(check_loss(loss)?)?,
        AnnealLoss::Valid => s.tick(),
    }
    s.expected_skip();
    Ok(())
}

struct FeedforwardTrainer {
    net: MollifiedNet,
    schedule: AnnealState,
    optimizer: OptimizerState,
    train: Dataset,
    valid: Dataset,
    batch_size: usize,
    anneal_loss: AnnealLoss,
    order: RngStream,
    noise: Vec<RngStream>,
}

impl FeedforwardTrainer {
    fn new(cfg: &RunConfig, root: &RngStream) -> Result<Self, RunError> {
        let mut data_rng = root.substream(0);
        let (data, head) = match cfg.task {
            Task::Parity => (tasks::gen_parity(cfg.bits, cfg.examples, &mut data_rng), Head::SigmoidCrossEntropy),
            Task::ToyRegression => (tasks::gen_toy_regression(cfg.examples, &mut data_rng), Head::MeanSquared),
            Task::SeqCopy => unreachable!("sequence task uses the recurrent trainer"),
        };
        let (train, valid) = data.split(cfg.valid_fraction, &mut root.substream(1));
        let residual = cfg.baseline == Baseline::ResidualPlain;
        let net = MollifiedNet::glorot(
            data.inputs.cols(),
            cfg.hidden,
            cfg.layers,
            data.targets.cols(),
            cfg.activation,
            head,
            noise_constant(cfg),
            residual,
            &mut root.substream(2),
        );
        let optimizer = OptimizerState::new(cfg.optimizer_config(), &net.parameter_shapes())?;
        Ok(FeedforwardTrainer {
            schedule: new_schedule(cfg)?,
            optimizer,
            train,
            valid,
            batch_size: cfg.batch_size,
            anneal_loss: cfg.anneal_loss,
            order: root.substream(3),
            noise: (0..cfg.layers as u64).map(|l| root.substream(10 + l)).collect(),
            net,
        })
    }

    fn scored(&self, data: &Dataset, levels: &[f64]) -> Result<(f64, f64), StepError> {
        let logits = self.net.forward_infer(&data.inputs, levels)?;
        let head = self.net.output.head;
        Ok((check_loss(head.loss(&logits, &data.targets)?)?, head.accuracy(&logits, &data.targets)?))
    }
}

impl Trainer for FeedforwardTrainer {
    fn model(&self) -> Model {
        Model::Feedforward(self.net.clone())
    }

    fn parameter_count(&self) -> usize {
        self.net.parameter_shapes().len()
    }

    fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    fn schedule(&self) -> &AnnealState {
        &self.schedule
    }

    fn schedule_mut(&mut self) -> &mut AnnealState {
        &mut self.schedule
    }

    fn initial_losses(&self) -> Result<(f64, f64), StepError> {
        let plain = vec![0.0; self.net.depth()];
        Ok((self.scored(&self.train, &plain)?.0, self.scored(&self.valid, &plain)?.0))
    }

    fn epoch(&mut self) -> Result<u64, StepError> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.order.shuffle(&mut order);
        let mut updates = 0;
        for chunk in order.chunks(self.batch_size) {
            let batch = self.train.select(chunk);
            let levels = self.schedule.levels();
            let (loss, grads, _) = self
                .net
                .loss_and_grads(&batch.inputs, &batch.targets, &levels, &mut self.noise)?;
            check_loss(loss)?;
            self.net.apply_gradients(&grads, &mut self.optimizer)?;
            anneal_update(&mut self.schedule, loss, self.anneal_loss)?;
            updates += 1;
        }
        Ok(updates)
    }

    fn evaluate(&self) -> Result<(f64, f64, f64, f64), StepError> {
        let levels = self.schedule.levels();
        let (tl, ta) = self.scored(&self.train, &levels)?;
        let (vl, va) = self.scored(&self.valid, &levels)?;
        Ok((tl, ta, vl, va))
    }
}

struct RecurrentTrainer {
    net: RecurrentNet,
    schedule: AnnealState,
    optimizer: OptimizerState,
    train: SequenceDataset,
    valid: SequenceDataset,
    batch_size: usize,
    anneal_loss: AnnealLoss,
    bptt: usize,
    order: RngStream,
    noise: RngStream,
}

impl RecurrentTrainer {
    fn new(cfg: &RunConfig, root: &RngStream) -> Result<Self, RunError> {
        let data = tasks::gen_seq_copy(cfg.examples, cfg.seq_len, cfg.vocab, cfg.delay, &mut root.substream(0));
        let (train, valid) = data.split(cfg.valid_fraction, &mut root.substream(1));
        let classes = cfg.vocab + 1;
        let net = RecurrentNet::glorot(cfg.cell, classes, cfg.hidden, classes, noise_constant(cfg), &mut root.substream(2));
        let optimizer = OptimizerState::new(cfg.optimizer_config(), &net.parameter_shapes())?;
        Ok(RecurrentTrainer {
            schedule: new_schedule(cfg)?,
            optimizer,
            train,
            valid,
            batch_size: cfg.batch_size,
            anneal_loss: cfg.anneal_loss,
            bptt: cfg.bptt,
            order: root.substream(3),
            noise: root.substream(10),
            net,
        })
    }

    fn scored(&self, data: &SequenceDataset, p: f64) -> Result<(f64, f64), StepError> {
        let (logits, _) = self
            .net
            .forward_infer(&data.inputs, self.net.initial_state(data.len()), p, self.schedule.t)?;
        let loss = check_loss(self.net.sequence_loss(&logits, &data.targets)?)?;
        let head = self.net.output.head;
        let mut acc = 0.0;
        for (z, y) in logits.iter().zip(&data.targets) {
            acc += head.accuracy(z, y)?;
        }
        Ok((loss, acc / logits.len() as f64))
    }
}

impl Trainer for RecurrentTrainer {
    fn model(&self) -> Model {
        Model::Recurrent(self.net.clone())
    }

    fn parameter_count(&self) -> usize {
        self.net.parameter_shapes().len()
    }

    fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    fn schedule(&self) -> &AnnealState {
        &self.schedule
    }

    fn schedule_mut(&mut self) -> &mut AnnealState {
        &mut self.schedule
    }

    fn initial_losses(&self) -> Result<(f64, f64), StepError> {
        Ok((self.scored(&self.train, 0.0)?.0, self.scored(&self.valid, 0.0)?.0))
    }

    fn epoch(&mut self) -> Result<u64, StepError> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.order.shuffle(&mut order);
        let mut updates = 0;
        for chunk in order.chunks(self.batch_size) {
            let batch = self.train.select(chunk);
            let mut state = self.net.initial_state(chunk.len());
            for start in (0..batch.steps()).step_by(self.bptt) {
                let end = (start + self.bptt).min(batch.steps());
                let p = self.schedule.schedule_p(1);
                let t = self.schedule.t;
                let pass = self
                    .net
                    .forward_train(&batch.inputs[start..end], state, p, t, &mut self.noise)?;
                let (loss, grads) = self.net.backward(&pass, &batch.targets[start..end])?;
                check_loss(loss)?;
                self.net.apply_gradients(&grads, &mut self.optimizer)?;
                anneal_update(&mut self.schedule, loss, self.anneal_loss)?;
                state = pass.final_state();
                updates += 1;
            }
        }
        Ok(updates)
    }

    fn evaluate(&self) -> Result<(f64, f64, f64, f64), StepError> {
        let p = self.schedule.schedule_p(1);
        let (tl, ta) = self.scored(&self.train, p)?;
        let (vl, va) = self.scored(&self.valid, p)?;
        Ok((tl, ta, vl, va))
    }
}

fn save_checkpoint(trainer: &dyn Trainer, path: &Path, epoch: u64, step: u64, seed: u64) -> Result<(), RunError> {
    let ck = Checkpoint::new(trainer.model(), trainer.schedule().clone(), epoch, step, seed)
        .with_optimizer(OptimizerSnapshot::capture(trainer.optimizer(), trainer.parameter_count()));
    ck.save(path)?;
    Ok(())
}

/// Trains one seed into `cfg.out/seed-<seed>`.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedReport, RunError> {
    cfg.validate()?;
    let dir = cfg.out.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let csv_path = dir.join("metrics.csv");
    let ck_path = dir.join("checkpoint.json");
    let layers = cfg.schedule_layers();

    let root = RngStream::new(seed);
    let mut trainer: Box<dyn Trainer> = match cfg.task {
        Task::SeqCopy => Box::new(RecurrentTrainer::new(cfg, &root)?),
        _ => Box::new(FeedforwardTrainer::new(cfg, &root)?),
    };
    let started = Instant::now();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    let fail = |rows: &[MetricsRow], epoch: u64, step: u64, e: StepError| -> RunError {
        if let Err(io) = write(&csv_path, &metrics::render(layers, rows)) {
            return io;
        }
        match e {
            StepError::Diverged(reason) => RunError::Diverged {
                seed,
                epoch,
                step,
                reason,
                checkpoint: ck_path.clone(),
            },
            StepError::Model(m) => RunError::Model(m),
        }
    };

    if cfg.baseline == Baseline::Mollified {
        match trainer.initial_losses() {
            Ok((train, valid)) => trainer.schedule_mut().observe(match cfg.anneal_loss {
                AnnealLoss::Train => train,
                AnnealLoss::Valid => valid,
            })?,
            Err(e) => return Err(fail(&rows, 0, 0, e)),
        }
    }
    save_checkpoint(trainer.as_ref(), &ck_path, 0, 0, seed)?;

    for epoch in 1..=cfg.epochs as u64 {
        match trainer.epoch() {
            Ok(n) => step += n,
            Err(e) => return Err(fail(&rows, epoch, step, e)),
        }
        let (train_loss, train_acc, valid_loss, valid_acc) = match trainer.evaluate() {
            Ok(v) => v,
            Err(e) => return Err(fail(&rows, epoch, step, e)),
        };
        if cfg.anneal_loss == AnnealLoss::Valid && cfg.baseline == Baseline::Mollified {
            trainer.schedule_mut().observe(valid_loss)?;
        }
        let levels = trainer.schedule().levels();
        rows.push(MetricsRow {
            epoch,
            step,
            train_loss,
            train_acc,
            valid_loss,
            valid_acc,
            expected_skip: levels.iter().sum(),
            levels,
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        save_checkpoint(trainer.as_ref(), &ck_path, epoch, step, seed)?;
        if cfg.target_train_acc.is_some_and(|a| train_acc >= a) {
            break;
        }
    }
    write(&csv_path, &metrics::render(layers, &rows))?;
    Ok(SeedReport { seed, rows, dir })
}

/// Logits of a feedforward checkpoint at `p = 0`.
pub fn checkpoint_logits(ck: &Checkpoint, inputs: &Matrix) -> Result<Matrix, RunError> {
    match &ck.model {
        Model::Feedforward(net) => Ok(net.forward_infer(inputs, &vec![0.0; net.depth()])?),
        Model::Recurrent(_) => Err(RunError::Config(ConfigError::Invalid(
            "checkpoint holds a recurrent model".into(),
        ))),
    }
}
