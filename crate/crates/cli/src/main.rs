//! `wip`: synthesize, corrupt, train, infer, evaluate and analyze.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "wip", version, about = "Pairwise-distance motion capture pipeline")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic motion clip.
    Synth(SynthArgs),
    /// Turn a sequence into a noisy sensor-distance stream.
    Corrupt(CorruptArgs),
    /// Train a model (stage 1 on clean data, stage 2 denoising fine-tune).
    Train(TrainArgs),
    /// Run a checkpoint (or the classical baseline) over a distance stream.
    Infer(InferArgs),
    /// Score predicted poses against a ground-truth sequence.
    Eval(EvalArgs),
    /// Eigen-spectrum and triangle-inequality diagnostics of a distance stream.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LowerBody {
    Feet,
    Knees,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value = "walk")]
    pub kind: String,
    /// Seconds.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 60.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep metric units and skip anchors.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, value_enum, default_value = "feet")]
    pub lower_body: LowerBody,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    /// Sequence file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    pub sigma: f64,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "feet")]
    pub lower_body: LowerBody,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// JSON file with optional `variant`, `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training sequence files.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Stage-1 checkpoint to fine-tune (stage 2 only).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "feet")]
    pub lower_body: LowerBody,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FeedbackArg {
    Pose,
    Head,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Matrix stream file, or `-` for standard input.
    #[arg(long)]
    pub stream: PathBuf,
    /// Use the classical reconstruction instead of a model.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, value_enum, default_value = "pose")]
    pub feedback: FeedbackArg,
    #[arg(long)]
    pub no_smooth: bool,
    #[arg(long, value_enum, default_value = "feet")]
    pub lower_body: LowerBody,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Pose stream.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth sequence file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted distance stream for CEV/TIS columns.
    #[arg(long)]
    pub pred_pwd: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "feet")]
    pub lower_body: LowerBody,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    let result: Result<(), CliError> = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Corrupt(a) => commands::corrupt(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wip: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
