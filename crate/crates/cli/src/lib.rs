//! Command-line experiment runner: dataset generation, training,
//! evaluation, the eight-mode ablation and the gradient-check suite.

pub mod ablation;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod run;

use clap::{Parser, Subcommand};
use config::{ExperimentConfig, CONFIG_ENV};
use error::Result;
use mtl_core::gradsuite::SuiteOptions;
use mtl_core::multitask::ExperimentMode;
use run::EvalSplit;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "mtl", version, about = "Multi-task food classification and portion estimation")]
pub struct Cli {
    /// Experiment config (TOML). Every key is optional.
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Generator seed for gen-data, model seed for train, the single seed
    /// for ablation, sampling seed for gradcheck.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Dataset directory for gen-data, run root for train and ablation,
    /// results directory for eval.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Overwrite a non-empty dataset directory.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, split and balance the synthetic dataset.
    GenData,
    /// Train one mode and write a run directory.
    Train {
        #[arg(long)]
        mode: Option<ExperimentMode>,
        /// Dataset directory (default: data.path).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and append to results.jsonl.
    Eval {
        /// Checkpoint file or run directory.
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every mode over the seed set.
    Ablation {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Comma-separated subset of modes.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<ExperimentMode>>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        /// Random points per component.
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// Runs one command, writing human-readable progress to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = ExperimentConfig::locate(cli.config.as_deref())?;
    let say = |out: &mut dyn Write, line: String| {
        let _ = writeln!(out, "{line}");
    };
    match cli.command {
        Command::GenData => {
            if let Some(s) = cli.seed {
                cfg.data.generator.seed = s;
            }
            let cfg = cfg.resolve()?;
            let dir = cli.out.unwrap_or_else(|| cfg.data.path.clone());
            let s = run::gen_data(&cfg, &dir, cli.force)?;
            say(
                out,
                format!(
                    "wrote {} ({} classes, {} train, {} test)",
                    s.dir.display(),
                    s.n_classes,
                    s.train,
                    s.test
                ),
            );
        }
        Command::Train { mode, data } => {
            if let Some(m) = mode {
                cfg.mode = m;
            }
            apply_common(&mut cfg, cli.seed, cli.out, data);
            let cfg = cfg.resolve()?;
            let o = run::train(&cfg)?;
            if let Some(last) = o.logs.last() {
                say(
                    out,
                    format!(
                        "epoch {}: l_c {:.4} l_r {:.4} l_ps {:.4e} overall {:.4}",
                        last.epoch, last.l_c, last.l_r, last.l_ps, last.overall
                    ),
                );
            }
            say(out, format!("run directory {}", o.run_dir.display()));
        }
        Command::Eval { checkpoint, split, data } => {
            apply_common(&mut cfg, cli.seed, None, data);
            let cfg = cfg.resolve()?;
            let o = run::eval(&cfg, &checkpoint, split, cli.out.as_deref())?;
            say(out, o.record.to_string());
            say(out, format!("appended to {}", o.results_path.display()));
        }
        Command::Ablation { data, modes } => {
            if let Some(s) = cli.seed {
                cfg.ablation.seeds = vec![s];
            }
            if let Some(m) = modes {
                cfg.ablation.modes = m;
            }
            apply_common(&mut cfg, None, cli.out, data);
            let cfg = cfg.resolve()?;
            let o = ablation::ablation(&cfg, |r| {
                let status = r.error.as_deref().unwrap_or("ok");
                say(out, format!("{} seed {}: {status}", r.mode, r.seed));
            })?;
            say(out, o.table.to_text());
            say(out, format!("table written to {}", o.dir.display()));
            o.into_result()?;
        }
        Command::Gradcheck { points, corrupt } => {
            let opts = SuiteOptions {
                points,
                seed: cli.seed.unwrap_or(0),
                corrupt,
                ..SuiteOptions::default()
            };
            let o = gradcheck::gradcheck(&opts)?;
            let _ = write!(out, "{}", o.render());
            o.into_result()?;
        }
    }
    Ok(())
}

fn apply_common(cfg: &mut ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>, data: Option<PathBuf>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if let Some(d) = data {
        cfg.data.path = d;
    }
}
