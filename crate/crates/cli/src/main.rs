//! `lasskit`: corpus prep, benchmark building, training, separation and evaluation.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] lasskit::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    /// The command ran but part of its work failed.
    #[error("{0}")]
    Partial(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Partial(_) | CliError::Lib(lasskit::Error::NonFinite(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lasskit", version, about = "Text-queried audio source separation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (falls back to the config file, then LASSKIT_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mix two files at a target SNR or at two loudness levels.
    Mix(commands::MixArgs),
    /// Write the two-class synthetic corpus (tones vs. band-limited noise).
    ToyCorpus(commands::ToyCorpusArgs),
    /// Build an evaluation set for one protocol.
    BenchBuild(commands::BenchBuildArgs),
    /// Train (or resume training) a separator.
    Train(commands::TrainArgs),
    /// Separate one file with a text query.
    Separate(commands::SeparateArgs),
    /// Evaluate a checkpoint or a baseline over an evaluation set.
    Evaluate(commands::EvaluateArgs),
    /// Finite-difference check of the analytic gradients.
    GradCheck(commands::GradCheckArgs),
    /// Convert an external embedding JSONL file into a table file.
    EmbedImport(commands::EmbedImportArgs),
}

fn init_logging(g: &GlobalArgs) {
    let level = if g.quiet {
        log::LevelFilter::Error
    } else {
        match g.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.global);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
