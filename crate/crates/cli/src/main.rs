//! Command-line lifecycle for the watermarking pipeline:
//! train -> watermark -> verify / attack -> evaluate.
//!
//! Exit codes: 0 success (and, for verify, all inputs verified),
//! 1 verification failure, 2 usage or configuration error,
//! 3 artifact incompatibility (checkpoint format/version).

mod commands;
mod manifest;
mod plots;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "textmark", version, about = "Multi-bit text watermarking pipeline")]
struct Cli {
    /// Worker threads for sample-level parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a JSONL corpus and write a checkpoint.
    Train {
        /// Training config JSON (flat TrainConfig fields).
        #[arg(long, env = "TEXTMARK_CONFIG")]
        config: Option<PathBuf>,
        /// Architecture config JSON (ModelConfig fields).
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in both configs.
        #[arg(long)]
        seed: Option<u64>,
        /// Loss trace CSV path (default `<out>.loss.csv`).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Also write the vocabulary as a plain-text file.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
    /// Insert signatures into JSONL texts with a trained checkpoint.
    Watermark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Literal bit string inserted into every record.
        #[arg(long, conflicts_with_all = ["message_file", "random_messages"])]
        message: Option<String>,
        /// File of bit strings, one per line, cycled over records.
        #[arg(long, conflicts_with = "random_messages")]
        message_file: Option<PathBuf>,
        /// Sample this many random messages and cycle them over records.
        #[arg(long)]
        random_messages: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Beam width B.
        #[arg(long)]
        beam: Option<usize>,
        /// Search iterations K.
        #[arg(long)]
        iters: Option<usize>,
        /// Comma-separated per-iteration temperatures.
        #[arg(long)]
        temps: Option<String>,
        #[arg(long)]
        mask_pct: Option<f64>,
    },
    /// Verify signatures in watermarked JSONL records.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// z-score verdict threshold.
        #[arg(long, default_value_t = 4.0)]
        threshold: f64,
    },
    /// Apply a removal attack to watermarked JSONL records.
    Attack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One of delete, add, replace, rephrase, rewatermark.
        #[arg(long)]
        attack: String,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Synonym table file (replace, rephrase).
        #[arg(long)]
        synonyms: Option<PathBuf>,
        /// Corpus JSONL for the rephrase acceptance scorer.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Checkpoint providing the vocabulary; the adversary model for
        /// rewatermark.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rephrase acceptance floor.
        #[arg(long)]
        floor: Option<f64>,
        /// Beam width for rewatermark insertion.
        #[arg(long)]
        beam: Option<usize>,
        /// Iterations for rewatermark insertion (0 disables the attack).
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        temps: Option<String>,
        #[arg(long)]
        mask_pct: Option<f64>,
    },
    /// Aggregate metrics and detection AUC into a report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Insertion output JSONL.
        #[arg(long)]
        watermarked: PathBuf,
        /// Clean corpus JSONL (non-watermarked population).
        #[arg(long)]
        clean: PathBuf,
        /// Attack output JSONL as name=path; repeatable.
        #[arg(long)]
        attacked: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for ROC CSV files.
        #[arg(long)]
        roc_dir: Option<PathBuf>,
        /// Also render simple static SVG plots of the ROC curves.
        #[arg(long, default_value_t = false)]
        plots: bool,
        #[arg(long, default_value_t = 4.0)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // results are identical for any thread count; this only bounds workers
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let result = match cli.command {
        Command::Train { config, model_config, corpus, out, seed, loss_csv, vocab_out } => {
            commands::train::run(config, model_config, corpus, out, seed, loss_csv, vocab_out)
        }
        Command::Watermark {
            checkpoint,
            input,
            out,
            message,
            message_file,
            random_messages,
            seed,
            beam,
            iters,
            temps,
            mask_pct,
        } => commands::watermark::run(commands::watermark::Args {
            checkpoint,
            input,
            out,
            message,
            message_file,
            random_messages,
            seed,
            beam,
            iters,
            temps,
            mask_pct,
        }),
        Command::Verify { checkpoint, input, out, threshold } => {
            commands::verify::run(checkpoint, input, out, threshold)
        }
        Command::Attack {
            input,
            out,
            attack,
            rate,
            seed,
            synonyms,
            corpus,
            checkpoint,
            floor,
            beam,
            iters,
            temps,
            mask_pct,
        } => commands::attack::run(commands::attack::Args {
            input,
            out,
            attack,
            rate,
            seed,
            synonyms,
            corpus,
            checkpoint,
            floor,
            beam,
            iters,
            temps,
            mask_pct,
        }),
        Command::Evaluate { checkpoint, watermarked, clean, attacked, out, roc_dir, plots, threshold } => {
            commands::evaluate::run(
                checkpoint, watermarked, clean, attacked, out, roc_dir, plots, threshold,
            )
        }
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Maps failures onto the documented exit codes.
fn classify(err: &anyhow::Error) -> u8 {
    use textmark_core::Error as CoreError;
    if let Some(core) = err.downcast_ref::<CoreError>() {
        match core {
            CoreError::CheckpointVersion { .. } | CoreError::CheckpointFormat(_) => 3,
            _ => 2,
        }
    } else {
        2
    }
}
