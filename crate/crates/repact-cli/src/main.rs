//! `repact` — train, fuse, verify, and benchmark adaptive activations.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 numeric
//! failure (NaN abort or a tolerance violation).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "repact",
    version,
    about = "Adaptive multi-branch activations with single-branch fused inference",
    after_help = "Environment: REPACT_THREADS caps internal parallelism (default: all cores)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON experiment config.
    Train {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the checkpoint and metrics CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint's test accuracy.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replace every activation by its fused piecewise form first.
        #[arg(long)]
        fused: bool,
        /// Override the dataset directory recorded in the checkpoint.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Fold every activation layer into its inference form and export a
    /// standalone fused-model JSON document.
    Fuse {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Path of the fused-model JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that the training-form and fused-form activations agree.
    Verify {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Random probe inputs per layer, drawn from [-10, 10].
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        /// Largest tolerated |training − fused| gap (32-bit path).
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Seed for the probe inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Verify against a fused-model export instead of fusing in-process.
        #[arg(long)]
        fused: Option<PathBuf>,
    },
    /// Export a layer's fused activation curve (x, value, derivative) as CSV.
    Curves {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Activation layer name, e.g. block0.act.
        #[arg(long)]
        layer: String,
        /// Sample range: low and high bound.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, default_values_t = [-10.0, 10.0])]
        range: Vec<f64>,
        /// Number of uniform samples across the range.
        #[arg(long, default_value_t = 201)]
        steps: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit the layer's branch-weight trajectory from the training
        /// metrics instead of the activation curve.
        #[arg(long)]
        alphas: bool,
    },
    /// Static per-element cost and measured ns/element of fused evaluation
    /// versus the explicit multi-branch sum.
    Bench {
        /// Fused-model JSON written by `fuse`.
        #[arg(long)]
        model: PathBuf,
        /// Buffer length used for timing.
        #[arg(long, default_value_t = 1_000_000)]
        elements: usize,
        /// Timing repeats; the best run counts.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Seed for the probe buffer.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every parameter gradient of the configured
    /// model, in 64-bit.
    Gradcheck {
        /// Experiment config (JSON); only the model section and seed are used.
        #[arg(long)]
        config: PathBuf,
        /// Largest tolerated relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Batch size of the probe input.
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
}

fn exit_code_for(err: &repact::Error) -> u8 {
    match err {
        repact::Error::Invalid(_) | repact::Error::Config(_) => 1,
        repact::Error::Io { .. } | repact::Error::Format { .. } => 2,
        repact::Error::Numeric(_) => 3,
    }
}

fn init_threads() {
    let threads = std::env::var("REPACT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    if let Some(n) = threads {
        // Ignore the error if a pool already exists (tests call main twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    init_threads();
    let result = match cli.command {
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Eval {
            checkpoint,
            fused,
            data_dir,
        } => commands::eval(&checkpoint, fused, data_dir.as_deref()),
        Command::Fuse { checkpoint, out } => commands::fuse(&checkpoint, &out),
        Command::Verify {
            checkpoint,
            samples,
            tol,
            seed,
            fused,
        } => commands::verify(&checkpoint, samples, tol, seed, fused.as_deref()),
        Command::Curves {
            checkpoint,
            layer,
            range,
            steps,
            out,
            alphas,
        } => commands::curves(&checkpoint, &layer, &range, steps, out.as_deref(), alphas),
        Command::Bench {
            model,
            elements,
            repeats,
            seed,
        } => commands::bench(&model, elements, repeats, seed),
        Command::Gradcheck { config, tol, batch } => commands::gradcheck(&config, tol, batch),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
