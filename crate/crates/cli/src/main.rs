//! `egomotion` command-line entry point.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "egomotion", version, about = "Egocentric motion diffusion experiments")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic takes and their image feature cache.
    Synth(commands::SynthArgs),
    /// Train the denoiser on a synthesized data directory.
    Train(commands::TrainArgs),
    /// Train the proxy motion encoder used by semantic similarity and FID.
    TrainEncoder(commands::TrainEncoderArgs),
    /// Reconstruct motion from a take's device trajectory and image features.
    Reconstruct(commands::ReconstructArgs),
    /// Forecast motion after an observed prefix.
    Forecast(commands::ForecastArgs),
    /// Generate motion from a single image feature.
    Generate(commands::GenerateArgs),
    /// Compare predicted and reference motions.
    Eval(commands::EvalArgs),
    /// Fit a skeleton to multi-view 2D keypoints.
    Fit(commands::FitArgs),
    /// Write a synthetic camera rig, keypoints and initialization for `fit`.
    SynthRig(commands::SynthRigArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::TrainEncoder(a) => commands::train_encoder(&a),
        Command::Reconstruct(a) => commands::reconstruct(&a),
        Command::Forecast(a) => commands::forecast(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::SynthRig(a) => commands::synth_rig(&a),
    };
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
