//! Command-line front end: training, prototype export, explanations,
//! interpolation, metric harnesses and embedding export.

mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use protovae::Error;

#[derive(Parser)]
#[command(name = "protovae", version, about = "Prototypical VAE classifier with LRP explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint + per-epoch metrics.
    Train(commands::TrainArgs),
    /// Decode every prototype of a checkpoint to PGM images.
    Prototypes(commands::PrototypesArgs),
    /// Relevance maps for the most similar prototypes of one image.
    Explain(commands::ExplainArgs),
    /// Decode the affine path between two prototypes.
    Interpolate(commands::InterpolateArgs),
    /// Accuracy, AD/AI or relevance-ordering metrics on a dataset.
    Metrics(commands::MetricsArgs),
    /// Dump μ embeddings of a dataset plus all prototypes as CSV.
    ExportEmbeddings(commands::ExportEmbeddingsArgs),
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Prototypes(args) => commands::prototypes(args),
        Command::Explain(args) => commands::explain(args),
        Command::Interpolate(args) => commands::interpolate(args),
        Command::Metrics(args) => commands::metrics(args),
        Command::ExportEmbeddings(args) => commands::export_embeddings(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::NumericalFailure { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// PROTOVAE_THREADS caps the rayon worker count.
fn init_thread_pool() {
    if let Ok(raw) = std::env::var("PROTOVAE_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
