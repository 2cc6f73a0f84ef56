use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use st3d::data::Split;
use st3d_cli::{EvalArgs, MeanArgs, PredictArgs, TrainArgs};

/// 3D residual networks for video action recognition.
#[derive(Parser)]
#[command(name = "st3d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-stage output shapes and parameter counts.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Train from scratch, fine-tune, or resume a run.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Starting weights (overrides train.init_checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-clip and per-video accuracy on one manifest split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Directory for eval.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-5 classes for a directory of frames.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Supplies the crop size and channel mean.
        #[arg(long)]
        config: Option<PathBuf>,
        frames: PathBuf,
    },
    /// Mean R, G, B over the training videos of a manifest.
    ComputeMean {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Mean file to write (defaults to data.mean_file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let result = match &cli.command {
        Command::Inspect { config, json } => st3d_cli::inspect(config, *json, &mut stdout),
        Command::Train {
            config,
            checkpoint,
            seed,
            out,
        } => st3d_cli::train(
            TrainArgs {
                config,
                checkpoint: checkpoint.as_deref(),
                seed: *seed,
                out: out.as_deref(),
            },
            &mut stdout,
        ),
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => st3d_cli::eval(
            EvalArgs {
                config,
                checkpoint,
                split: *split,
                out: out.as_deref(),
            },
            &mut stdout,
        )
        .map(|_| ()),
        Command::Predict {
            checkpoint,
            config,
            frames,
        } => st3d_cli::predict(
            PredictArgs {
                checkpoint,
                frames,
                config: config.as_deref(),
            },
            &mut stdout,
        ),
        Command::ComputeMean {
            config,
            manifest,
            out,
        } => st3d_cli::compute_mean(
            MeanArgs {
                config: config.as_deref(),
                manifest: manifest.as_deref(),
                out: out.as_deref(),
            },
            &mut stdout,
        )
        .map(|_| ()),
    };
    let _ = stdout.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
