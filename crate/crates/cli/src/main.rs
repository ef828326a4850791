//! `eivlg`: synthetic data, training, prediction and evaluation for
//! environment-infused video-language grounding.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "eivlg", version, about = "Environment-infused video-language grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the caption/query text encoder.
    TrainEncoder {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out_checkpoint: PathBuf,
    },
    /// Train the infuser and grounding head on top of an encoder checkpoint.
    TrainGrounder {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        encoder_checkpoint: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
    },
    /// Write ranked moment predictions for every query.
    Predict {
        #[arg(long)]
        data: PathBuf,
        /// Grounder checkpoint.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out_predictions: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Score predictions (from a file or a checkpoint) against the ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "checkpoints", required_unless_present = "checkpoints")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out_report: PathBuf,
        /// Include per-query IoU in the report.
        #[arg(long)]
        per_sample: bool,
    },
    /// Caption-only grounding: a fixed window around the best-matching caption.
    TextOnlyEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle_embeddings")]
        encoder_checkpoint: Option<PathBuf>,
        /// Use constructed embeddings that match the query exactly on GT captions.
        #[arg(long, conflicts_with = "encoder_checkpoint")]
        oracle_embeddings: bool,
        #[arg(long, default_value_t = eivlg_core::evaluation::DEFAULT_SPAN_S)]
        span_s: f64,
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Finite-difference check of every hand-derived gradient.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset manifest, or the directory holding `manifest.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out, seed } => commands::synth(config.as_deref(), &out, seed),
        Command::TrainEncoder { common, out_checkpoint } => {
            commands::train_encoder(&common.data, common.config.as_deref(), common.seed, &out_checkpoint)
        }
        Command::TrainGrounder {
            common,
            encoder_checkpoint,
            out_checkpoint,
        } => commands::train_grounder(
            &common.data,
            common.config.as_deref(),
            common.seed,
            &encoder_checkpoint,
            &out_checkpoint,
        ),
        Command::Predict {
            data,
            checkpoints,
            out_predictions,
            top_k,
        } => commands::predict(&data, &checkpoints, &out_predictions, top_k),
        Command::Eval {
            data,
            predictions,
            checkpoints,
            out_report,
            per_sample,
        } => {
            let source = match (predictions, checkpoints) {
                (Some(p), None) => commands::PredictionSource::File(p),
                (None, Some(c)) => commands::PredictionSource::Checkpoint(c),
                _ => return Err(CliError::Usage("give exactly one of --predictions or --checkpoints".into())),
            };
            commands::eval(&data, source, &out_report, per_sample)
        }
        Command::TextOnlyEval {
            data,
            encoder_checkpoint,
            oracle_embeddings,
            span_s,
            out_report,
        } => {
            let embeddings = match (encoder_checkpoint, oracle_embeddings) {
                (Some(c), false) => commands::Embeddings::Checkpoint(c),
                (None, true) => commands::Embeddings::Oracle,
                _ => {
                    return Err(CliError::Usage(
                        "give exactly one of --encoder-checkpoint or --oracle-embeddings".into(),
                    ))
                }
            };
            commands::text_only_eval(&data, embeddings, span_s, &out_report)
        }
        Command::Gradcheck { seeds, inject_fault } => commands::gradcheck(seeds, inject_fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EIVLG_LOG", "warn"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
