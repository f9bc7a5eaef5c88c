use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::Protocol;

#[derive(Debug, Parser)]
#[command(name = "icrm", version, about = "Variational in-context reward modeling experiments")]
pub struct Cli {
    /// Seed for every random draw. Required.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the numerical self-checks.
    Verify {
        /// Write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train one run, or one per λ in a sweep.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parent directory for run directories.
        #[arg(long)]
        out: PathBuf,
        /// KL weight; repeat for a sweep.
        #[arg(long)]
        lambda: Vec<f64>,
        /// Train on a single context size.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(value_enum)]
        protocol: ProtocolArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Context size (replaces the configured grid).
        #[arg(long)]
        n: Option<usize>,
        /// Single mixing ratio for the pareto protocol.
        #[arg(long)]
        mix_ratio: Option<f64>,
        /// Reversed context and labels for the accuracy protocol.
        #[arg(long)]
        reversed: bool,
    },
    /// Aggregate run directories into one CSV.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    Accuracy,
    Calibration,
    Pareto,
    Bandit,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Accuracy => Protocol::Accuracy,
            ProtocolArg::Calibration => Protocol::Calibration,
            ProtocolArg::Pareto => Protocol::Pareto,
            ProtocolArg::Bandit => Protocol::Bandit,
        }
    }
}
