use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mollify_harness::config::RunConfig;
use mollify_harness::oracle_cli::{parse_theta, run_oracle};
use mollify_harness::{plot, run_experiment};

#[derive(Parser)]
#[command(name = "mollify", version, about = "Train and inspect mollified networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to a config file plus flag overrides.
    Run(Box<RunArgs>),
    /// Render CSV columns as an SVG line chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// Comma-separated column names.
        #[arg(long, default_value = "train_loss,valid_loss")]
        cols: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo smoothed value and gradient of a built-in objective.
    Oracle {
        #[arg(long)]
        objective: String,
        /// Comma-separated coordinates.
        #[arg(long, allow_hyphen_values = true)]
        theta: String,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    c: Option<String>,
    /// Single seed; replaces the configured list.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Any other key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        let flags = [
            ("task", &self.task),
            ("bits", &self.bits),
            ("layers", &self.layers),
            ("hidden", &self.hidden),
            ("k", &self.k),
            ("delta", &self.delta),
            ("c", &self.c),
            ("seeds", &self.seed),
            ("epochs", &self.epochs),
            ("baseline", &self.baseline),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v).with_context(|| format!("--{key}"))?;
            }
        }
        for pair in &self.set {
            let Some((key, value)) = pair.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {pair:?}");
            };
            cfg.set(key.trim(), value.trim()).with_context(|| format!("--set {pair}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let summary = run_experiment(&cfg)?;
            for s in &summary.seeds {
                let last = s.rows.last();
                println!(
                    "seed {}: {} epochs, train_acc {}, reached 99% at {}",
                    s.seed,
                    s.rows.len(),
                    last.map_or("-".into(), |r| format!("{:.4}", r.train_acc)),
                    s.epochs_to(0.99).map_or("never".into(), |e| format!("epoch {e}")),
                );
            }
            println!("aggregate: {}", summary.aggregate.display());
        }
        Command::Plot { csv, cols, out } => {
            let text = std::fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let columns: Vec<&str> = cols.split(',').map(str::trim).collect();
            let svg = plot::emit_plot(&text, &columns)?;
            std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Oracle {
            objective,
            theta,
            sigma,
            samples,
            seed,
        } => {
            print!("{}", run_oracle(&objective, &parse_theta(&theta)?, sigma, samples, seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
