mod cmd;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::cmd::{curate, features, report, retrieval, train};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Voice-characteristics description retrieval: corpus curation, feature
/// extraction, contrastive training and retrieval.
#[derive(Debug, Parser)]
#[command(name = "voxret", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus quality filters, clustering, splits and labels.
    #[command(subcommand)]
    Curate(curate::CurateCmd),
    /// Speech feature extraction and time stretching.
    #[command(subcommand)]
    Features(features::FeaturesCmd),
    /// Train projection and feature heads on frozen encoder vectors.
    Train(train::TrainArgs),
    /// Embed a manifest's audio vectors into a searchable index.
    Index(retrieval::IndexArgs),
    /// Top-k segments for each description vector.
    Retrieve(retrieval::RetrieveArgs),
    /// Zero-shot label for every indexed segment.
    Classify(retrieval::ClassifyArgs),
    /// Retrieval and zero-shot evaluation.
    #[command(subcommand)]
    Eval(retrieval::EvalCmd),
    /// Exports for plotting.
    #[command(subcommand)]
    Report(report::ReportCmd),
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    match cli.command {
        Command::Curate(c) => curate::run(c, &cfg, seed),
        Command::Features(c) => features::run(c, &cfg),
        Command::Train(a) => train::run(a, &cfg, seed),
        Command::Index(a) => retrieval::index(a),
        Command::Retrieve(a) => retrieval::retrieve(a),
        Command::Classify(a) => retrieval::classify(a),
        Command::Eval(c) => retrieval::eval(c),
        Command::Report(c) => report::run(c, &cfg),
    }
}

fn parse_error(e: clap::Error) -> CliError {
    let text = e.to_string();
    let first = text
        .lines()
        .next()
        .unwrap_or_default()
        .trim_start_matches("error: ")
        .to_string();
    match e.kind() {
        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
            CliError::usage("missing subcommand; see --help")
        }
        ErrorKind::InvalidSubcommand | ErrorKind::UnknownArgument => CliError::usage(first),
        _ => CliError::validation("arguments", first),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = parse_error(e);
            eprintln!("{err}");
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
