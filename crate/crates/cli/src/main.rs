//! `allpairs`: data generation, training, planning, verification and plot
//! export for certified all-pairs motion planning.

mod commands;
mod config;
mod failure;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "allpairs", version, about)]
struct Cli {
    /// Worker threads; 1 keeps every output byte-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// JSON object whose keys override this subcommand's flags, except
    /// flags given explicitly on the command line.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the environment and write labeled training data.
    GenData(commands::gen_data::Args),
    /// Train a map on a dataset and calibrate its level set.
    Train(commands::train::Args),
    /// Roll out a trajectory from a trained model.
    Plan(commands::plan::Args),
    /// Run the certificate suite on a trained model.
    Verify(commands::verify::Args),
    /// Write SVG and JSON plot data.
    ExportPlots(commands::plots::Args),
}

fn run() -> Result<(), Failure> {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(Failure::input)?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let overrides = cli.config.as_deref().map(config::load_overrides).transpose()?;
    let ov = overrides.as_ref();
    match cli.command {
        Command::GenData(a) => commands::gen_data::run(config::resolve(a, ov, sub)?),
        Command::Train(a) => commands::train::run(config::resolve(a, ov, sub)?),
        Command::Plan(a) => commands::plan::run(config::resolve(a, ov, sub)?),
        Command::Verify(a) => commands::verify::run(config::resolve(a, ov, sub)?),
        Command::ExportPlots(a) => commands::plots::run(config::resolve(a, ov, sub)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
