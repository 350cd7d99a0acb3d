use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crate::commands::{cmd_eval, cmd_gen, cmd_gradcheck, cmd_pretrain, cmd_transfer, RunContext};
use crate::config::{RunConfig, Settings};

#[derive(Debug, Parser)]
#[command(name = "hydrodeep", version, about = "Seeded HydroDeep experiments on synthetic watersheds")]
pub struct Cli {
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides synth.seed, arch.seed and train.seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the source and target watersheds.
    Gen {
        /// Output directory [default: <run_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain on the source watershed.
    Pretrain {
        /// Source watershed directory [default: <run_dir>/data/<source name>].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path [default: <run_dir>/pretrain/model.hdc].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the transfer matrix on the declared targets.
    Transfer {
        /// Pretrained checkpoint [default: <run_dir>/pretrain/model.hdc].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory holding one subdirectory per target [default: <run_dir>/data].
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Evaluate a checkpoint without finetuning.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Watershed directory [default: the source watershed].
        #[arg(long)]
        data: Option<PathBuf>,
        /// train, validation or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient check of every layer and the full model.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn context(cli: &Cli) -> Result<RunContext> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seeds(seed);
    }
    Ok(RunContext::new(Settings::resolve(&cfg)?, cli.force))
}

pub fn run(cli: Cli, w: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Gradcheck { inject_fault } => {
            if !cmd_gradcheck(*inject_fault, w)?.passed() {
                bail!("gradient check failed");
            }
        }
        Command::Gen { out } => {
            cmd_gen(&context(&cli)?, out.as_deref(), w)?;
        }
        Command::Pretrain { data, checkpoint } => {
            cmd_pretrain(&context(&cli)?, data.as_deref(), checkpoint.as_deref(), w)?;
        }
        Command::Transfer { checkpoint, targets } => {
            cmd_transfer(&context(&cli)?, checkpoint.as_deref(), targets.as_deref(), w)?;
        }
        Command::Eval { checkpoint, data, split } => {
            cmd_eval(&context(&cli)?, checkpoint.as_deref(), data.as_deref(), split, w)?;
        }
    }
    Ok(())
}
