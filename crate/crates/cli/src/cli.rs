//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use quantnet::metrics::LossKind;

use crate::commands::{cmd_eval, cmd_gen, cmd_report, cmd_train, summary_line};
use crate::config::ExperimentConfig;
use crate::error::{Result, EXIT_NUMERIC, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "quantnet", version, about = "Class-prevalence estimation experiments")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print nothing on success.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Train the configured quantifier.
    Train,
    /// Evaluate a trained model on a directory of labeled bags.
    Eval {
        /// Artifact file or the directory holding `model.json`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bags: PathBuf,
        /// rae, nmd or ae; defaults to the configured loss.
        #[arg(long)]
        loss: Option<LossKind>,
        /// Method label in the summary; defaults to the architecture tag.
        #[arg(long)]
        name: Option<String>,
    },
    /// Compare evaluation summaries.
    Report {
        /// Evaluation directories (or summary files).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// What a successful run prints, and its exit code.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub code: i32,
}

impl Cli {
    /// File config (if any) with command-line overrides applied.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = cli.experiment()?;
    let ok = |stdout: String| Outcome { stdout, code: EXIT_OK };
    match &cli.command {
        Command::Gen => Ok(ok(cmd_gen(&cfg)?)),
        Command::Train => {
            let t = cmd_train(&cfg)?;
            let code = if t.diverged { EXIT_NUMERIC } else { EXIT_OK };
            if t.diverged {
                log::error!("training diverged; the artifact holds the best parameters seen before that");
            }
            Ok(Outcome { stdout: t.message(), code })
        }
        Command::Eval { model, bags, loss, name } => {
            let out = cfg.out_dir()?;
            let r = cmd_eval(model, bags, loss.unwrap_or(cfg.loss), name.as_deref(), out)?;
            Ok(ok(summary_line(&r.summary())))
        }
        Command::Report { inputs } => {
            let r = cmd_report(inputs, cfg.out.as_deref())?;
            Ok(ok(r.to_text().trim_end().to_string()))
        }
    }
}
