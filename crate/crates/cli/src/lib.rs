//! `pcml` experiment runner: configs in, CSV/JSON/SVG artifacts out.

pub mod commands;
pub mod config;
pub mod output;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::config::ConfigError;
use crate::plot::{PlotError, PlotKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Bench(#[from] pcml_core::bench::BenchError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Csv(String),
    #[error("output directory {0} exists and is not empty; pass --force to replace it")]
    OutputExists(String),
    #[error("every seed failed: {0}")]
    AllSeedsFailed(String),
    #[error("invalid input: {0}")]
    Input(String),
}

impl CliError {
    /// Stable identifier for the machine-readable error record.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Bench(_) => "experiment",
            CliError::Plot(_) => "plot",
            CliError::Io { .. } => "io",
            CliError::Csv(_) => "csv",
            CliError::OutputExists(_) => "output_exists",
            CliError::AllSeedsFailed(_) => "all_seeds_failed",
            CliError::Input(_) => "input",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into().display().to_string(),
            source,
        }
    }

    pub fn record(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "pcml", version, about = "Physics-constrained ML benchmark runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single seed; overrides PCML_SEED and the config's seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Worker threads for seed-parallel runs (default: available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Trajectory,
    Bands,
    Loss,
}

impl From<KindArg> for PlotKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Trajectory => PlotKind::Trajectory,
            KindArg::Bands => PlotKind::Bands,
            KindArg::Loss => PlotKind::Loss,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (and optionally run VI) per seed, then write metrics, reports and plots.
    Run(CommonArgs),
    /// Write the train/test datasets of each seed.
    GenerateData(CommonArgs),
    /// Recompute metrics from a saved parameter file.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// `params_seed<n>.json` written by `run`.
        #[arg(long)]
        params: PathBuf,
    },
    /// Paired standalone-ML versus constrained runs over the seed list.
    Compare(CommonArgs),
    /// Render a CSV written by `run` as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        x_label: Option<String>,
        #[arg(long)]
        y_label: Option<String>,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let result = match cli.command {
        Command::Run(a) => commands::run(&a, env_seed.as_deref()).map(|_| ()),
        Command::GenerateData(a) => commands::generate_data(&a, env_seed.as_deref()),
        Command::Evaluate { common, params } => commands::evaluate(&common, &params),
        Command::Compare(a) => commands::compare(&a, env_seed.as_deref()).map(|_| ()),
        Command::Plot {
            csv,
            kind,
            out,
            x_label,
            y_label,
        } => commands::plot(&csv, kind.into(), &out, x_label, y_label),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.record());
            1
        }
    }
}
