// SPDX-License-Identifier: MIT OR Apache-2.0

//! `vlmflow`: generate worlds, wire models, run intervention experiments
//! and render their curves.
//!
//! Exit codes: 0 on success, 1 on validation errors (including bad flags),
//! 2 on I/O errors.

mod commands;
mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::{Flags, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "vlmflow",
    version,
    about = "Identity-flow experiments on a hand-wired vision-language transformer",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic worlds.
    #[command(subcommand)]
    World(WorldCommand),
    /// Model construction.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Experiments.
    #[command(subcommand)]
    Run(RunCommand),
    /// Figures.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Debug, Subcommand)]
enum WorldCommand {
    /// Generate a world file.
    Gen(Flags),
}

#[derive(Debug, Subcommand)]
enum ModelCommand {
    /// Wire a model for a world and check it against its certificate.
    Wire(Flags),
}

#[derive(Debug, Subcommand)]
enum RunCommand {
    /// Identification gate, paired QA and the modality gap.
    Eval(Flags),
    /// Cross-patching sweep over layers.
    Crosspatch(Flags),
    /// Freeze-patching sweep over source layers.
    Freeze(Flags),
    /// Attention knockout sweeps.
    Knockout(Flags),
    /// Early/late identification split.
    Split(Flags),
}

#[derive(Debug, Subcommand)]
enum ReportCommand {
    /// Render a sweep CSV as an SVG line plot.
    Render(Flags),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vlmflow_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 1,
            Self::Io { .. } => 2,
            Self::Core(e) if e.is_io() => 2,
            Self::Core(_) => 1,
        }
    }
}

type Runner = fn(&RunConfig) -> Result<(), CliError>;

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (name, flags, run): (&str, Flags, Runner) = match cli.command {
        Command::World(WorldCommand::Gen(f)) => ("world gen", f, commands::world_gen),
        Command::Model(ModelCommand::Wire(f)) => ("model wire", f, commands::model_wire),
        Command::Run(RunCommand::Eval(f)) => ("run eval", f, commands::run_eval),
        Command::Run(RunCommand::Crosspatch(f)) => ("run crosspatch", f, commands::run_crosspatch),
        Command::Run(RunCommand::Freeze(f)) => ("run freeze", f, commands::run_freeze),
        Command::Run(RunCommand::Knockout(f)) => ("run knockout", f, commands::run_knockout),
        Command::Run(RunCommand::Split(f)) => ("run split", f, commands::run_split),
        Command::Report(ReportCommand::Render(f)) => ("report render", f, commands::report_render),
    };
    let config = RunConfig::resolve(name, &flags)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = config.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    pool.install(|| run(&config))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
