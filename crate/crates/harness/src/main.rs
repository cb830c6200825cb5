use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lam_core::Error;
use lam_harness::ablation::{arms_for, run_ablation, AblationKind, DEFAULT_DEPTHS, DEFAULT_TOLERANCE};
use lam_harness::artifacts::{analyze, write_ablation, write_run};
use lam_harness::config::{default_config, RunConfig};
use lam_harness::gradcheck::{run_suite, TOLERANCE};
use lam_harness::stats::{DEFAULT_BINS, DEFAULT_EPSILON};
use lam_harness::train::{total_steps, train_model};

/// Learnable attention mask experiments on a synthetic planted-token task.
#[derive(Parser)]
#[command(name = "lam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare tape gradients with central finite differences for every
    /// strategy on small one-layer encoders.
    GradCheck {
        /// Model widths to check.
        #[arg(long, value_delimiter = ',', default_value = "4")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        seq_len: usize,
    },
    /// Print the default run configuration as JSON.
    DefaultConfig,
    /// Train one model and write its result, masks and attention histogram.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Also save the trained weights under `<out-dir>/checkpoint`.
        #[arg(long)]
        checkpoint: bool,
    },
    /// Train every arm of an ablation grid under every seed.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKind,
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the seed in the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// LAM depths for `--kind depth`.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DEPTHS)]
        depths: Vec<usize>,
        /// Relative parameter-count tolerance for `--kind params`.
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Summarize exported attention records (`records.json`).
    Analyze {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

enum Failure {
    Config(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load(path: &Path) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(path)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GradCheck { dims, seq_len } => {
            let checks = run_suite(&dims, seq_len)?;
            let mut worst = 0.0f64;
            for c in &checks {
                let mark = if c.max_rel_error <= TOLERANCE { "ok  " } else { "FAIL" };
                println!("{mark} {:<48} params {:>5}  max rel err {:.3e}", c.label, c.n_params, c.max_rel_error);
                worst = worst.max(c.max_rel_error);
            }
            println!("worst relative error {worst:.3e} (tolerance {TOLERANCE:e})");
            if worst > TOLERANCE {
                return Err(Failure::Numeric(format!("gradient check failed: {worst:.3e}")));
            }
        }
        Command::DefaultConfig => {
            let text = serde_json::to_string_pretty(&default_config()).map_err(Error::from)?;
            println!("{text}");
        }
        Command::Train {
            config,
            out_dir,
            checkpoint,
        } => {
            let cfg = load(&config)?;
            let arm = cfg.encoder.strategy.label();
            let (result, model) = train_model(arm, &cfg)?;
            for p in write_run(&out_dir, &result)? {
                println!("wrote {}", p.display());
            }
            if checkpoint {
                let dir = out_dir.join("checkpoint");
                model.save_checkpoint(&dir, total_steps(&cfg))?;
                println!("wrote {}", dir.display());
            }
            println!(
                "{arm}: params {} train_acc {:.4} eval_acc {:.4} fraction_below {:.4} ({:.1}s)",
                result.param_count, result.train_acc, result.eval_acc, result.attention.fraction_below, result.seconds
            );
        }
        Command::Ablate {
            kind,
            config,
            seeds,
            depths,
            tolerance,
            out_dir,
        } => {
            let cfg = load(&config)?;
            let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
            let arms = arms_for(kind, &cfg, &depths, tolerance)?;
            let rows = run_ablation(&arms, &seeds)?;
            for r in &rows {
                println!(
                    "{:<24} seed {:>3}  params {:>6}  eval_acc {:.4}  fraction_below {:.4}",
                    r.arm, r.seed, r.result.param_count, r.result.eval_acc, r.result.attention.fraction_below
                );
            }
            let written = write_ablation(&out_dir, &rows)?;
            println!("wrote {} files under {}", written.len(), out_dir.display());
        }
        Command::Analyze {
            records,
            epsilon,
            bins,
            out_dir,
        } => {
            let s = analyze(&records, epsilon, bins, &out_dir)?;
            println!(
                "{} weights: fraction_below({epsilon}) {:.4}, skewness {:.4}",
                s.n_weights, s.fraction_below, s.skewness
            );
            println!("wrote {}", out_dir.join("stats.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
