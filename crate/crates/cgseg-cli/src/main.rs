//! Command line for the storm segmentation pipeline.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use clap::{Parser, Subcommand};

use cgseg_cli::commands::{
    cmd_curves, cmd_eval, cmd_features, cmd_gen_synthetic, cmd_predict, cmd_stats, cmd_train,
    CurvesArgs, EvalArgs, FeaturesArgs, GenSyntheticArgs, PredictArgs, StatsArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "cgseg",
    about = "Context-guided segmentation of tropical cyclones and atmospheric rivers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic storm dataset directory.
    GenSynthetic(GenSyntheticArgs),
    /// Derive the wind-speed and vorticity channels into a new dataset.
    Features(FeaturesArgs),
    /// Print class frequencies and channel statistics of a dataset.
    Stats(StatsArgs),
    /// Train a model from an experiment configuration file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Predict one sample's segmentation and write it as CGT1 (and PPM).
    Predict(PredictArgs),
    /// Emit precision-recall and ROC threshold sweeps as CSV.
    Curves(CurvesArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
        Command::Features(args) => cmd_features(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Curves(args) => cmd_curves(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
