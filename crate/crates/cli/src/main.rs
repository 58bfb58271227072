//! `frozen-align`: inspect feature stores, train the text projection, and
//! run the evaluation suites.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 corrupt
//! store or checkpoint, 3 non-finite loss, 4 missing embedding, 5 leak or
//! seen/unseen overlap.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use frozen_align::Error;

use config::Overrides;

#[derive(Parser)]
#[command(name = "frozen-align", version, about = "Align frozen vision and text embeddings with a learned text projection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainFlags {
    /// Root seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
}

impl From<TrainFlags> for Overrides {
    fn from(f: TrainFlags) -> Self {
        Overrides { seed: f.seed, max_steps: f.max_steps, batch_size: f.batch_size, tau: f.tau }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a feature store and print its header.
    Inspect {
        store: PathBuf,
        /// Also print the first N ids with their vector norms.
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
    /// Train the projection on an image-caption manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
    /// Score a checkpoint on classification, retrieval, Winoground and
    /// caption-choice tasks.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Run only this dataset's tasks.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include per-item Winoground verdicts.
        #[arg(long)]
        verbose: bool,
    },
    /// Run the seen/unseen class transfer benchmark.
    Viterb {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        /// Run only this dataset.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BadMagic { .. } | Error::VersionUnsupported { .. } | Error::TruncatedFile { .. } | Error::CorruptStore { .. } => 2,
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => 3,
        Error::MissingEmbedding(_) | Error::UnresolvedId { .. } => 4,
        Error::LeakDetected(_) | Error::OverlapDetected(_) => 5,
        _ => 1,
    }
}

/// `FROZEN_ALIGN_THREADS` caps both the rayon pool and the matrix-multiply
/// threads.
fn configure_threads() {
    let Some(n) = std::env::var("FROZEN_ALIGN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) else {
        return;
    };
    std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Inspect { store, head } => commands::inspect(&store, head),
        Command::Train { config, flags, out, verbose } => commands::train_cmd(&config, &flags.into(), out, verbose),
        Command::Eval { config, dataset, out, verbose } => commands::eval_cmd(&config, dataset.as_deref(), out, verbose),
        Command::Viterb { config, flags, dataset, out, verbose } => {
            commands::viterb_cmd(&config, &flags.into(), dataset.as_deref(), out, verbose)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
