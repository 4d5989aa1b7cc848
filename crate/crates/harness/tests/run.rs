#![allow(clippy::needless_range_loop)]

use std::path::Path;
use std::process::Command;

use mollify_core::checkpoint::{Checkpoint, Model};
use mollify_core::numerics::RngStream;
use mollify_harness::config::{Baseline, RunConfig, Task};
use mollify_harness::metrics::Table;
use mollify_harness::tasks;
use mollify_harness::{run_experiment, RunError};

fn small_parity(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("bits", "4"),
        ("examples", "64"),
        ("layers", "3"),
        ("hidden", "6"),
        ("epochs", "5"),
        ("batch_size", "8"),
        ("seeds", "3"),
        ("learning_rate", "0.1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.out = out.to_path_buf();
    cfg
}

/// Plain sigmoid MLP with logistic output, written without the library's
/// matrix type.
struct RefMlp {
    w: Vec<Vec<Vec<f64>>>,
    b: Vec<Vec<f64>>,
    vw: Vec<Vec<Vec<f64>>>,
    vb: Vec<Vec<f64>>,
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RefMlp {
    fn from_checkpoint(ck: &Checkpoint) -> RefMlp {
        let Model::Feedforward(net) = &ck.model else { panic!("expected a feedforward model") };
        let mut w = Vec::new();
        let mut b = Vec::new();
        let to_rows = |m: &mollify_core::numerics::Matrix| (0..m.rows()).map(|r| m.row(r).to_vec()).collect::<Vec<_>>();
        for l in &net.layers {
            w.push(to_rows(&l.weights));
            b.push(l.bias.row(0).to_vec());
        }
        w.push(to_rows(&net.output.weights));
        b.push(net.output.bias.row(0).to_vec());
        let vw = w.iter().map(|m| m.iter().map(|r| vec![0.0; r.len()]).collect()).collect();
        let vb = b.iter().map(|r| vec![0.0; r.len()]).collect();
        RefMlp { w, b, vw, vb }
    }

    /// Activations of every layer; the last entry holds the logit.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let n = self.w.len();
        for (i, (w, b)) in self.w.iter().zip(&self.b).enumerate() {
            let h = acts.last().unwrap();
            let z: Vec<f64> = (0..b.len())
                .map(|j| b[j] + h.iter().enumerate().map(|(k, hk)| hk * w[k][j]).sum::<f64>())
                .collect();
            acts.push(if i + 1 == n { z } else { z.into_iter().map(sig).collect() });
        }
        acts
    }

    fn loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        let total: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| {
                let z = self.forward(x).last().unwrap()[0];
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        total / xs.len() as f64
    }

    fn sgd_step(&mut self, xs: &[Vec<f64>], ys: &[f64], lr: f64, mu: f64) {
        let mut gw: Vec<Vec<Vec<f64>>> = self.vw.iter().map(|m| m.iter().map(|r| vec![0.0; r.len()]).collect()).collect();
        let mut gb: Vec<Vec<f64>> = self.vb.iter().map(|r| vec![0.0; r.len()]).collect();
        let n = self.w.len();
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.forward(x);
            let mut delta = vec![(sig(acts[n][0]) - y) / xs.len() as f64];
            for l in (0..n).rev() {
                for (k, hk) in acts[l].iter().enumerate() {
                    for (j, dj) in delta.iter().enumerate() {
                        gw[l][k][j] += hk * dj;
                    }
                }
                for (j, dj) in delta.iter().enumerate() {
                    gb[l][j] += dj;
                }
                if l > 0 {
                    delta = (0..acts[l].len())
                        .map(|k| {
                            let back: f64 = delta.iter().enumerate().map(|(j, dj)| self.w[l][k][j] * dj).sum();
                            back * acts[l][k] * (1.0 - acts[l][k])
                        })
                        .collect();
                }
            }
        }
        let step = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v - lr * g;
                *p += *v;
            }
        };
        for l in 0..n {
            for k in 0..self.w[l].len() {
                step(&mut self.w[l][k], &mut self.vw[l][k], &gw[l][k]);
            }
            step(&mut self.b[l], &mut self.vb[l], &gb[l]);
        }
    }
}

fn rows_of(m: &mollify_core::numerics::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[test]
fn plain_baseline_tracks_reference_mlp() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_parity(&dir.path().join("run"));
    cfg.baseline = Baseline::Plain;
    let mut init = cfg.clone();
    init.epochs = 0;
    init.out = dir.path().join("init");
    run_experiment(&init).unwrap();
    let summary = run_experiment(&cfg).unwrap();
    let rows = &summary.seeds[0].rows;
    assert_eq!(rows.len(), 5);

    let seed = 3;
    let root = RngStream::new(seed);
    let data = tasks::gen_parity(4, 64, &mut root.substream(0));
    let (train, valid) = data.split(cfg.valid_fraction, &mut root.substream(1));
    let (tx, ty) = (rows_of(&train.inputs), train.targets.as_slice().to_vec());
    let (vx, vy) = (rows_of(&valid.inputs), valid.targets.as_slice().to_vec());
    let ck = Checkpoint::load(&dir.path().join("init/seed-3/checkpoint.json")).unwrap();
    let mut mlp = RefMlp::from_checkpoint(&ck);
    let mut order_rng = root.substream(3);

    for row in rows {
        let mut order: Vec<usize> = (0..tx.len()).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(8) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| tx[i].clone()).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| ty[i]).collect();
            mlp.sgd_step(&xs, &ys, 0.1, 0.92);
        }
        let (tl, vl) = (mlp.loss(&tx, &ty), mlp.loss(&vx, &vy));
        assert!((row.train_loss - tl).abs() < 1e-10, "epoch {}: {} vs {}", row.epoch, row.train_loss, tl);
        assert!((row.valid_loss - vl).abs() < 1e-10, "epoch {}: {} vs {}", row.epoch, row.valid_loss, vl);
        assert_eq!(row.expected_skip, 0.0);
    }
}

#[test]
fn identical_runs_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for task in [Task::Parity, Task::SeqCopy] {
        let mut csvs = Vec::new();
        for name in ["a", "b"] {
            let mut cfg = small_parity(&dir.path().join(format!("{}-{name}", task.name())));
            cfg.task = task;
            cfg.seeds = vec![1, 2];
            cfg.examples = 24;
            cfg.epochs = 3;
            cfg.seq_len = 5;
            cfg.bptt = 2;
            run_experiment(&cfg).unwrap();
            let read = |p: &str| std::fs::read(cfg.out.join(p)).unwrap();
            csvs.push((read("seed-1/metrics.csv"), read("seed-2/metrics.csv"), read("aggregate.csv")));
        }
        assert_eq!(csvs[0], csvs[1]);
        assert_ne!(csvs[0].0, csvs[0].1, "different seeds should differ");
    }
}

#[test]
fn zero_epochs_writes_header_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_parity(dir.path());
    cfg.epochs = 0;
    let summary = run_experiment(&cfg).unwrap();
    assert!(summary.seeds[0].rows.is_empty());
    let csv = std::fs::read_to_string(dir.path().join("seed-3/metrics.csv")).unwrap();
    assert_eq!(csv, format!("{}\n", mollify_harness::metrics::header(3)));
    let ck = Checkpoint::load(&dir.path().join("seed-3/checkpoint.json")).unwrap();
    assert_eq!((ck.epoch, ck.step, ck.seed), (0, 0, 3));
}

#[test]
fn metrics_csv_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_parity(dir.path());
    let summary = run_experiment(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("seed-3/metrics.csv")).unwrap();
    let rows = Table::parse(&text).unwrap().to_rows().unwrap();
    assert_eq!(rows, summary.seeds[0].rows);
    assert!(rows.windows(2).all(|w| w[0].step < w[1].step));
    for r in &rows {
        assert!((r.expected_skip - r.levels.iter().sum::<f64>()).abs() < 1e-12);
        assert!(r.levels.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_parity(dir.path());
    cfg.task = Task::ToyRegression;
    cfg.baseline = Baseline::Plain;
    cfg.learning_rate = 1e6;
    cfg.momentum = 0.0;
    match run_experiment(&cfg) {
        Err(RunError::Diverged { checkpoint, epoch, .. }) => {
            let ck = Checkpoint::load(&checkpoint).unwrap();
            assert_eq!(ck.epoch, epoch - 1);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn unwritable_output_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = small_parity(&blocker.join("sub"));
    assert!(matches!(run_experiment(&cfg), Err(RunError::Io { .. })));
}

#[test]
fn residual_plain_runs_without_annealing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_parity(dir.path());
    cfg.baseline = Baseline::ResidualPlain;
    let summary = run_experiment(&cfg).unwrap();
    assert!(summary.seeds[0].rows.iter().all(|r| r.expected_skip == 0.0));
}

#[test]
fn early_stop_at_target_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_parity(dir.path());
    cfg.target_train_acc = Some(0.0);
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.seeds[0].rows.len(), 1);
    assert_eq!(summary.seeds[0].epochs_to(0.0), Some(1));
}

fn mollify() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mollify"))
}

#[test]
fn cli_oracle_prints_csv() {
    let out = mollify()
        .args(["oracle", "--objective", "quadratic", "--theta", "-1,2", "--sigma", "0", "--samples", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "value,std_error,grad_1,grad_2\n5,0,-2,4\n");
}

#[test]
fn cli_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "bits = 4\nlayres = 3\n").unwrap();
    let out = mollify().arg("run").arg("--config").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("layres") && err.contains("line 2"), "{err}");
}

#[test]
fn cli_run_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "bits = 3\nexamples = 20\nlayers = 2\nhidden = 4\nepochs = 2\nbatch_size = 5\n").unwrap();
    let status = mollify()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "4", "--baseline", "plain", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let csv = dir.path().join("out/seed-4/metrics.csv");
    assert!(csv.exists());
    let svg = dir.path().join("curves.svg");
    let ok = mollify()
        .arg("plot")
        .arg("--csv")
        .arg(&csv)
        .args(["--cols", "train_loss,valid_loss", "--out"])
        .arg(&svg)
        .status()
        .unwrap();
    assert!(ok.success());
    assert_eq!(std::fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 2);
    let bad = mollify()
        .arg("plot")
        .arg("--csv")
        .arg(&csv)
        .args(["--cols", "nope", "--out"])
        .arg(&svg)
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8(bad.stderr).unwrap().contains("available"));
}
