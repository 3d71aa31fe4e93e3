mod cache;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Face age progression and regression.
#[derive(Parser, Debug)]
#[command(name = "glca", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Training config file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Loss weight preset.
    #[arg(long, global = true)]
    weights: Option<Preset>,
    /// Config override, repeatable: `--set max_iters=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root for relative image paths and default inputs.
    #[arg(long, global = true, env = "GLCA_DATA_ROOT")]
    data_root: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Preset {
    Morph,
    Cacd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Progression,
    Regression,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Align raw images from a manifest into a face cache and split folds.
    Prepare {
        /// Defaults to `<data-root>/manifest.csv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Train a generator/discriminator pair on a prepared cache.
    Train {
        /// Prepared cache directory.
        #[arg(long)]
        cache: PathBuf,
        /// Frozen identity/age backend file.
        #[arg(long)]
        backend: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write progression/regression grids for cached faces.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        direction: Direction,
        /// Number of input faces.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Rank-1 recognition, age accuracy and ablation statistics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        backend: PathBuf,
        /// Held-out fold; defaults to the checkpoint's test fold, else all faces.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, value_enum, default_value = "cosine")]
        metric: MetricArg,
    },
    /// Write a fixture backend, optionally trained as an age classifier on a cache.
    Fixture {
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// File name inside the output directory.
        #[arg(long, default_value = "backend.bin")]
        name: String,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum MetricArg {
    Cosine,
    Euclidean,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Prepare { manifest, folds } => commands::prepare(&cli.common, manifest, folds),
        Command::Train { cache, backend, resume } => commands::train(&cli.common, &cache, &backend, resume),
        Command::Synthesize { checkpoint, cache, direction, limit } => {
            commands::synthesize(&cli.common, &checkpoint, &cache, direction, limit)
        }
        Command::Evaluate { checkpoint, cache, backend, fold, metric } => {
            commands::evaluate(&cli.common, &checkpoint, &cache, &backend, fold, metric)
        }
        Command::Fixture { cache, size, name } => commands::fixture(&cli.common, cache.as_deref(), size, &name),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
