//! Command-line runner: data preparation, training, evaluation, ablation and
//! attention export, driven by a TOML [`config::RunConfig`].
//!
//! Exit codes: 0 success, 2 input error, 3 training divergence, 4 artifact
//! mismatch, 5 empty selection.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stagnn::dataset::SubDataset;

use crate::commands::Selector;
use crate::config::RunConfig;
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "stagnn", version, about = "Remaining-useful-life experiments on C-MAPSS data")]
pub struct Cli {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration sources. Each flag is shorthand for one `--set` key.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// `data_dir`
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// `dataset`
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// `output_dir`
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// `units`
    #[arg(long, global = true)]
    pub units: Option<usize>,
    /// `train.seed`
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `parallel_trials = true, deterministic = false`
    #[arg(long, global = true)]
    pub parallel_trials: bool,
}

impl RunArgs {
    pub fn overrides(&self) -> Vec<String> {
        let mut out = self.overrides.clone();
        let quote = |p: &std::path::Path| toml::Value::String(p.display().to_string()).to_string();
        if let Some(d) = &self.data_dir {
            out.push(format!("data_dir={}", quote(d)));
        }
        if let Some(d) = &self.dataset {
            out.push(format!("dataset={}", toml::Value::String(d.to_ascii_uppercase())));
        }
        if let Some(d) = &self.output_dir {
            out.push(format!("output_dir={}", quote(d)));
        }
        if let Some(n) = self.units {
            out.push(format!("units={n}"));
        }
        if let Some(s) = self.seed {
            out.push(format!("train.seed={s}"));
        }
        if self.parallel_trials {
            out.push("parallel_trials=true".into());
            out.push("deterministic=false".into());
        }
        out
    }

    pub fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit normalization and the sensor graph; write window counts.
    Prep,
    /// Train all trials; write checkpoints and the loss report.
    Train,
    /// Score a checkpoint on the test units.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the six model variants and tabulate their metrics.
    Ablation,
    /// Dump attention coefficients and head features for selected windows.
    Export {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Select training windows instead of the last test window per unit.
        #[arg(long)]
        train_split: bool,
        /// Unit id to include (repeatable); all units when absent.
        #[arg(long = "unit", id = "unit")]
        units: Vec<u32>,
        /// 1-based window index within each unit.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write synthetic C-MAPSS-format files.
    Synth {
        #[arg(long = "to")]
        dir: PathBuf,
        #[arg(long = "synth-seed", default_value_t = 0)]
        synth_seed: u64,
        #[arg(long)]
        train_units: Option<usize>,
        #[arg(long)]
        test_units: Option<usize>,
    },
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Synth {
        dir,
        synth_seed,
        train_units,
        test_units,
    } = &cli.command
    {
        let dataset: SubDataset = cli.run.dataset.as_deref().unwrap_or("FD001").parse()?;
        return commands::synth(dataset, dir, *synth_seed, *train_units, *test_units);
    }
    let cfg = cli.run.load()?;
    match &cli.command {
        Command::Prep => {
            for r in commands::prep(&cfg)? {
                println!("{} {}: {} units, {} windows, {} skipped", r.dataset, r.split, r.units, r.windows, r.skipped_units);
            }
        }
        Command::Train => {
            let report = commands::train(&cfg)?;
            let (rm, rs) = report.rmse();
            let (sm, ss) = report.score();
            println!("RMSE {rm:.4} ± {rs:.4}  Score {sm:.4} ± {ss:.4}");
        }
        Command::Eval { checkpoint } => {
            let ev = commands::eval(&cfg, checkpoint.as_deref())?;
            println!("RMSE {:.4}  Score {:.4}  ({} units)", ev.rmse, ev.score, ev.predictions.len());
        }
        Command::Ablation => {
            println!("variant,rmse_mean,rmse_std,score_mean,score_std");
            for r in commands::ablation(&cfg)? {
                println!("{},{:.4},{:.4},{:.4},{:.4}", r.variant, r.rmse_mean, r.rmse_std, r.score_mean, r.score_std);
            }
        }
        Command::Export {
            checkpoint,
            train_split,
            units,
            window,
            output,
        } => {
            let selector = Selector {
                train_split: *train_split,
                units: units.clone(),
                window: *window,
            };
            let e = commands::export(&cfg, checkpoint.as_deref(), &selector, output.as_deref())?;
            println!("exported {} windows", e.records.len());
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
    Ok(())
}
