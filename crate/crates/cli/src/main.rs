//! `kzread`: synthesise datasets, train, evaluate, recognise and sweep.
//!
//! Log verbosity follows `KZREAD_LOG` (for example `KZREAD_LOG=debug`).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "kzread", version, about = "Segmentation-free reader for vertical multi-line documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a 9:1 train/validation split.
    Synth {
        /// key=value generator settings; defaults to two 3-character columns on 96×64.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset's train split, early-stopping on its validation split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key=value model and training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for best.ckpt, last.ckpt and train_log.csv.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = commands::SplitName::Test)]
        split: commands::SplitName,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Transcribe one image.
    Recognize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write one attention heatmap per decoding step into this directory.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train and score one model per (growth rate, depth) pair.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated KxD pairs, e.g. 8x4,16x4.
        #[arg(long)]
        grid: String,
        /// CSV output, rows sorted by CER.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("KZREAD_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, count, out, seed } => commands::synth(spec.as_deref(), count, &out, seed),
        Command::Train { data, config, out, resume } => {
            commands::train(&data, config.as_deref(), &out, resume.as_deref())
        }
        Command::Eval { data, checkpoint, split, json } => {
            commands::eval(&data, &checkpoint, split, json.as_deref())
        }
        Command::Recognize { image, checkpoint, trace } => {
            commands::recognize(&image, &checkpoint, trace.as_deref())
        }
        Command::Sweep { data, config, grid, out } => commands::sweep(&data, config.as_deref(), &grid, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
