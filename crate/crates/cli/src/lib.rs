//! Command-line driver: synthetic data, enrollment, querying, evaluation,
//! ablation sweeps and the toy trainer, all configured by one file.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{LoadedConfig, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sharc", version, about = "Shape and appearance person identification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory, overriding `paths.output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its gallery/query split.
    Synth(CommonArgs),
    /// Embed the gallery and save the index.
    Enroll(CommonArgs),
    /// Score queries against the saved index.
    Query(CommonArgs),
    /// Compute CMC and mAP from the saved scores.
    Evaluate(CommonArgs),
    /// Sweep the flattening exponent.
    AblateGamma(CommonArgs),
    /// Sweep the fusion weight.
    AblateAlpha(CommonArgs),
    /// Fit the toy encoder and write its loss trace.
    TrainToy(CommonArgs),
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Synth(a)
            | Command::Enroll(a)
            | Command::Query(a)
            | Command::Evaluate(a)
            | Command::AblateGamma(a)
            | Command::AblateAlpha(a)
            | Command::TrainToy(a) => a,
        }
    }
}

pub fn execute(command: &Command) -> Result<Vec<PathBuf>, CliError> {
    let args = command.args();
    let cfg = LoadedConfig::load(&args.config, args.out.clone())?;
    let run = || match command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Enroll(_) => commands::enroll(&cfg),
        Command::Query(_) => commands::query(&cfg),
        Command::Evaluate(_) => commands::evaluate_cmd(&cfg),
        Command::AblateGamma(_) => commands::ablate_gamma(&cfg),
        Command::AblateAlpha(_) => commands::ablate_alpha(&cfg),
        Command::TrainToy(_) => commands::train_toy_cmd(&cfg),
    };
    match args.threads {
        Some(0) => Err(CliError::Other("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Other(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Runs the command and maps failures to exit codes: 2 for a missing file,
/// 3 for an invalid config, 1 otherwise.
pub fn main_with(cli: Cli) -> i32 {
    match execute(&cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
