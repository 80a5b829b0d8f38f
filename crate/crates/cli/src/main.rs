//! `kws`: feature extraction, channel simulation, calibration, detection and
//! the threshold experiments.

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use kws_core::KwsError;

mod commands;
mod inputs;

/// Overrides the size of the worker pool.
const THREADS_ENV: &str = "KWS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "kws", version, about = "Few-shot keyword spotting with DTW and score calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Log-mel or HFCC features from WAV files, written as ESEQ.
    Features(commands::FeaturesArgs),
    /// Two-path Watterson fading plus white noise on WAV files.
    SimulateChannel(commands::ChannelArgs),
    /// Synthetic embedding world with planted keywords.
    MakeFixtures(commands::FixtureArgs),
    /// Quantize and/or normalize embeddings against a center bank.
    Calibrate(commands::CalibrateArgs),
    /// Detections at a fixed threshold.
    Detect(commands::DetectArgs),
    /// Threshold that maximizes the F-score on annotated recordings.
    SweepThreshold(commands::SweepArgs),
    /// Event-based F-score of a detection file.
    Evaluate(commands::EvaluateArgs),
    /// Full experiment grid: sweep on validation, apply to test, aggregate.
    EndToEnd(commands::RunArgs),
    /// Gap between validation-estimated and oracle test thresholds.
    GapAnalysis(commands::RunArgs),
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| KwsError::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Features(a) => commands::features(&a),
        Command::SimulateChannel(a) => commands::simulate_channel(&a),
        Command::MakeFixtures(a) => commands::make_fixtures(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::SweepThreshold(a) => commands::sweep(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::EndToEnd(a) => commands::end_to_end(&a),
        Command::GapAnalysis(a) => commands::gap_analysis(&a),
    }
}

/// 2 configuration, 3 data or format, 4 degenerate input.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|c| c.downcast_ref::<KwsError>())
        .map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
