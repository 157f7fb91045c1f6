//! `cxr`: command-line driver for the chest X-ray pipeline.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 when a
//! command fails at runtime.

mod commands;
mod config;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::CliConfig;

#[derive(Debug, Parser)]
#[command(name = "cxr", version, about = "Chest X-ray classification and similar-case retrieval")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic two-class dataset under the data root.
    Synth {
        #[arg(long, default_value_t = 130)]
        patients: usize,
        #[arg(long, default_value_t = 2)]
        images_per_patient: usize,
    },
    /// Validate the manifest and apply exclusions.
    Ingest,
    /// Patient-level train/test split.
    Split,
    /// Cache canonical images for the split.
    Preprocess,
    /// Train the configured model and register it.
    Train,
    /// Score the test split with the trained checkpoint.
    Evaluate,
    /// Train and compare the configured models on one split.
    Compare,
    /// Bootstrap confidence intervals over retrained splits.
    Bootstrap,
    /// Write embeddings for every split scan.
    Embed,
    /// Build the retrieval index and neighbour statistics.
    Index,
    /// t-SNE projection of the embeddings.
    Project,
    /// Plot-ready data files and SVG figures.
    Report,
    /// Serve the HTTP API for the registered model.
    Serve {
        /// Listen address; defaults to `serve.addr` from the config.
        #[arg(long)]
        addr: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest => "ingest",
            Command::Split => "split",
            Command::Preprocess => "preprocess",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Compare => "compare",
            Command::Bootstrap => "bootstrap",
            Command::Embed => "embed",
            Command::Index => "index",
            Command::Project => "project",
            Command::Report => "report",
            Command::Serve { .. } => "serve",
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::INFO,
        1 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_ansi(false)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    init_logging(cli.verbose);

    let mut cfg = match CliConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    cfg.apply_overrides(|k| std::env::var(k).ok(), cli.seed);
    if let Err(e) = cfg.validate() {
        eprintln!("error: invalid configuration: {e}");
        return ExitCode::from(1);
    }
    tracing::info!(
        command = cli.command.name(),
        config = %serde_json::to_string(&cfg).unwrap_or_default(),
        "resolved config"
    );

    let result = match cli.command {
        Command::Synth {
            patients,
            images_per_patient,
        } => commands::synth(&cfg, patients, images_per_patient),
        Command::Ingest => commands::ingest(&cfg),
        Command::Split => commands::split(&cfg),
        Command::Preprocess => commands::preprocess(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Evaluate => commands::evaluate_cmd(&cfg),
        Command::Compare => commands::compare(&cfg),
        Command::Bootstrap => commands::bootstrap(&cfg),
        Command::Embed => commands::embed(&cfg),
        Command::Index => commands::index(&cfg),
        Command::Project => commands::project(&cfg),
        Command::Report => commands::report(&cfg),
        Command::Serve { addr } => commands::serve(&cfg, addr),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = format!("{e:#}"), "command failed");
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
