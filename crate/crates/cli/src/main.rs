//! `emkfs simulate | reconstruct | evaluate`.

mod commands;
mod config;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<emkfs::Error> for CliError {
    fn from(e: emkfs::Error) -> Self {
        use emkfs::Error as E;
        match e.root() {
            E::Config(_) | E::Shape { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "emkfs", version, about = "Reduced Kalman filtering and smoothing for dynamic CT")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "EMKFS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a moving-blocks phantom and its noisy sinograms.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write 8-bit PGM previews.
        #[arg(long)]
        pgm: bool,
    },
    /// Reconstruct a simulated data set.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pgm: bool,
    },
    /// Compare reconstruction runs.
    Evaluate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for plot-ready per-timestep data.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    match cli.command {
        Command::Simulate { config, out, pgm } => commands::simulate(&config, out, pgm),
        Command::Reconstruct { config, data, out, pgm } => commands::reconstruct(&config, &data, out, pgm),
        Command::Evaluate { runs, out, plot_dir } => commands::evaluate(&runs, out, plot_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("emkfs: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
