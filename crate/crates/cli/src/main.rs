//! `mabsrec`: prepare data, train, evaluate and run ablations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mabsrec::corpus::DataFormat;
use mabsrec::evaluator::parse_bucket_edges;
use mabsrec::trainer::{Ablation, Preset};

use config::{Overrides, RunConfig, SplitName};

#[derive(Parser)]
#[command(name = "mabsrec", version, about = "Multi-bias sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, filter and split the data; write the corpus artifacts.
    Prepare(Shared),
    /// Train one model variant on prepared artifacts.
    Train(Shared),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        shared: Shared,
        /// Checkpoint to evaluate (default `<out>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitName>,
        /// Drop previously consumed items from each user's candidates.
        #[arg(long)]
        filter_seen: bool,
    },
    /// Train and test all four variants under one seed.
    Ablate(Shared),
}

#[derive(Args)]
struct Shared {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter preset: beauty, sports or ml20m.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// full, wo_G, wo_A or wo_D.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Sequence-length bucket edges, e.g. `5,10,20,50`.
    #[arg(long, value_parser = parse_edges)]
    buckets: Option<Edges>,
    #[arg(long)]
    k_pop: Option<f64>,
    #[arg(long)]
    k_subj: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Raw interaction file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// csv_events or movielens_ratings.
    #[arg(long)]
    format: Option<DataFormat>,
    /// MovieLens movies.csv sidecar.
    #[arg(long)]
    movies: Option<PathBuf>,
    /// Prepared-artifact directory (default `<out>/prepared`).
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Dataset name used in reports.
    #[arg(long)]
    dataset: Option<String>,
}

/// Bucket edges as one comma-separated argument.
#[derive(Clone)]
struct Edges(Vec<usize>);

fn parse_edges(text: &str) -> Result<Edges, String> {
    parse_bucket_edges(text).map(Edges).map_err(|e| e.to_string())
}

impl Shared {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset,
            out: self.out.clone(),
            data: self.data.clone(),
            format: self.format,
            movies: self.movies.clone(),
            artifacts: self.artifacts.clone(),
            dataset: self.dataset.clone(),
            seed: self.seed,
            ablation: self.ablation,
            k_pop: self.k_pop,
            k_subj: self.k_subj,
            max_epochs: self.max_epochs,
            buckets: self.buckets.clone().map(|e| e.0),
            ..Default::default()
        }
    }
}

fn run(cli: Cli) -> mabsrec::Result<()> {
    let load = |shared: &Shared, flags: Overrides| RunConfig::load(shared.config.as_deref(), &flags);
    match cli.command {
        Command::Prepare(s) => commands::prepare(&load(&s, s.overrides())?),
        Command::Train(s) => commands::train(&load(&s, s.overrides())?),
        Command::Ablate(s) => commands::ablate(&load(&s, s.overrides())?),
        Command::Eval {
            shared,
            checkpoint,
            split,
            filter_seen,
        } => {
            let flags = Overrides {
                checkpoint,
                split,
                filter_seen,
                ..shared.overrides()
            };
            commands::eval(&load(&shared, flags)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
