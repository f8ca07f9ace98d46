mod cmd;
mod config;
mod failure;
mod outdir;
mod report;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::failure::CmdResult;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure (including an output directory locked by another run)
  2  configuration error
  3  data error (unreadable, malformed or missing inputs; empty case list)
  4  numerical abort (non-finite loss)
  5  checkpoint or architecture mismatch
  6  gradient or oracle check over tolerance";

#[derive(Parser, Debug)]
#[command(name = "voxseg", version, about = "Volumetric 3D U-Net segmentation", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one fold (or all folds) from a run configuration.
    Train(cmd::train::TrainArgs),
    /// Score a checkpoint or saved predictions against ground truth.
    Eval(cmd::eval::EvalArgs),
    /// Segment images with a checkpoint.
    Predict(cmd::predict::PredictArgs),
    /// Run the finite-difference gradient checks and the kernel oracles.
    Gradcheck(cmd::gradcheck::GradcheckArgs),
    /// Generate a synthetic dataset.
    Synth(cmd::synth::SynthArgs),
    /// Write axial slices with ground-truth and prediction contours.
    Overlay(cmd::overlay::OverlayArgs),
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Train(a) => cmd::train::run(a),
        Command::Eval(a) => cmd::eval::run(a),
        Command::Predict(a) => cmd::predict::run(a),
        Command::Gradcheck(a) => cmd::gradcheck::run(a),
        Command::Synth(a) => cmd::synth::run(a),
        Command::Overlay(a) => cmd::overlay::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
