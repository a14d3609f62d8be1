//! `ckba` CLI: stage-by-stage driver for the surrogate/inversion experiment.
//!
//! Exit codes: 0 on success, 1 for validation problems (bad config, missing
//! or stale artifacts), 2 for numerical failures. Within-stage parallelism is
//! controlled by the `RAYON_NUM_THREADS` environment variable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ckba::pipeline::{run_stage, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(
    name = "ckba",
    about = "Conditional KLE + basis adaptation surrogates for Darcy-flow UQ and MAP inversion",
    version
)]
struct Cli {
    #[command(subcommand)]
    stage: StageCmd,
}

#[derive(Debug, Clone, clap::Args)]
struct StageArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for artifacts.
    #[arg(long, default_value = "ckba_out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum StageCmd {
    /// Draw the reference field and all synthetic observations.
    Synth(StageArgs),
    /// Build the unconditional KLE and the conditional CKLE bases.
    Eigs(StageArgs),
    /// Generate training/testing ensembles through the forward solver.
    Ensemble(StageArgs),
    /// Fit the configured basis-adaptation surrogate variants.
    Train(StageArgs),
    /// Compare surrogate and Monte-Carlo observable PDFs.
    Uq(StageArgs),
    /// Run BA-MAP and CKLEMAP estimates of the field.
    Invert(StageArgs),
    /// Emit the report CSV tables.
    Report(StageArgs),
}

impl StageCmd {
    fn split(self) -> (Stage, StageArgs) {
        match self {
            StageCmd::Synth(a) => (Stage::Synth, a),
            StageCmd::Eigs(a) => (Stage::Eigs, a),
            StageCmd::Ensemble(a) => (Stage::Ensemble, a),
            StageCmd::Train(a) => (Stage::Train, a),
            StageCmd::Uq(a) => (Stage::Uq, a),
            StageCmd::Invert(a) => (Stage::Invert, a),
            StageCmd::Report(a) => (Stage::Report, a),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = cli.stage.split();
    let config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ckba: {e}");
            return ExitCode::from(1);
        }
    };
    match run_stage(stage, &config, &args.out) {
        Ok(()) => {
            println!("ckba: stage `{}` complete in {}", stage.name(), args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ckba: stage `{}` failed: {e}", stage.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
