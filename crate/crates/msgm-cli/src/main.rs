//! msgm — operator surface for the multi-scale spatiotemporal graph EEG
//! pipeline: feature extraction, training, evaluation, benchmarking and
//! connectivity export.
//!
//! Exit codes: 0 success, 2 input error, 3 runtime failure.

mod commands;
mod config;
mod svg;

use clap::{Parser, Subcommand};
use msgm_core::error::MsgmError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "msgm", version, about = "Multi-scale spatiotemporal graph EEG emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic EEG dataset (EEGB files + manifest.json).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Extract per-scale rPSD feature CSVs from a manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train with subject-level cross-validation; writes results + checkpoints.
    Train {
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        /// Train on a generated synthetic dataset instead of a manifest.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the epoch cap from the config file.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a manifest; prints ACC and macro-F1.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Median forward latency per component and sequence length (CSV).
    Bench {
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "256,512,1024,2048", value_parser = commands::parse_seq_lengths)]
        seq_lengths: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export initial and trained adjacency matrices (CSV + SVG + stats).
    GraphExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn exit_code_for(err: &MsgmError) -> u8 {
    match err {
        MsgmError::Config(_)
        | MsgmError::Data(_)
        | MsgmError::Format(_)
        | MsgmError::Json(_)
        | MsgmError::TooShort { .. } => 2,
        MsgmError::Shape { .. } | MsgmError::Contract { .. } | MsgmError::Io(_) => 3,
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("MSGM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        } else {
            eprintln!("warning: ignoring unparsable MSGM_THREADS={threads}");
        }
    }

    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, out, seed, force } => {
            commands::cmd_synth(config.as_deref(), out, *seed, *force)
        }
        Command::Features { manifest, config, out, force } => {
            commands::cmd_features(manifest, config.as_deref(), out, *force)
        }
        Command::Train { manifest, synthetic, config, out, seed, epochs, force } => {
            commands::cmd_train(
                manifest.as_deref(),
                *synthetic,
                config.as_deref(),
                out,
                *seed,
                *epochs,
                *force,
            )
        }
        Command::Eval { checkpoint, manifest } => commands::cmd_eval(checkpoint, manifest),
        Command::Bench { seq_lengths, repeats, out } => {
            commands::cmd_bench(seq_lengths, *repeats, out.as_deref())
        }
        Command::GraphExport { checkpoint, scale, out, force } => {
            commands::cmd_graph_export(checkpoint, *scale, out, *force)
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            // training divergence across all folds is a runtime failure
            let code = if matches!(&err, MsgmError::Data(msg) if msg.contains("diverged")) {
                3
            } else {
                exit_code_for(&err)
            };
            ExitCode::from(code)
        }
    }
}
