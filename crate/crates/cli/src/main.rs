mod config;
mod eval;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fccgan::Error;

use config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(
    name = "fccgan",
    version,
    about = "Train, sample and score CNN and FCC-GAN models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a GAN, writing a self-describing run directory
    Train(run::TrainArgs),
    /// Print generator and discriminator layer tables with output shapes
    Describe {
        #[command(flatten)]
        config: ConfigArgs,
        /// Describe the configuration stored in a run directory
        #[arg(long, value_name = "DIR", conflicts_with = "config")]
        run: Option<PathBuf>,
    },
    /// Train the evaluation classifier and cache real-data feature statistics
    PrepareEval(eval::PrepareArgs),
    /// Score checkpoints with the evaluation classifier
    Score(eval::ScoreArgs),
    /// Write a grid of generated images
    Sample(eval::SampleArgs),
    /// Train one run per point along an ablation axis
    Sweep(run::SweepArgs),
}

/// Exit status for a library error: 2 configuration, 3 numerical abort,
/// 4 input/output.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::AccuracyFloor { .. } => 3,
        Error::Io { .. } | Error::Parse { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run::train(&args),
        Command::Describe { config, run } => run::describe(&config, run.as_deref()),
        Command::PrepareEval(args) => eval::prepare(&args),
        Command::Score(args) => eval::score(&args),
        Command::Sample(args) => eval::sample(&args),
        Command::Sweep(args) => run::sweep(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
