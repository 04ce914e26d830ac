use clap::{Parser, Subcommand};

use tvgcn_cli::commands;
use tvgcn_cli::Overrides;

#[derive(Parser)]
#[command(
    name = "tvgcn",
    about = "Tactile view-graph classifier: train and evaluate object recognition from sets of pressure frames",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train and test splits).
    Synth,
    /// Cluster each class of a dataset into pseudo-viewpoints.
    Cluster,
    /// Stage 1: train the backbone classifier on single frames.
    TrainBackbone,
    /// Stage 2: train the joint model on clustered view-sets.
    Train,
    /// Evaluate a trained model on view-sets from a test dataset.
    Eval,
    /// Check every parameter group's gradients against finite differences.
    Gradcheck,
    /// Convert NPY-exported pressure recordings into the dataset layout.
    #[cfg(feature = "stag")]
    ConvertStag(tvgcn_cli::npy::ConvertArgs),
}

fn main() {
    let cli = Cli::parse();
    let stage = match &cli.command {
        Command::Synth => "synth",
        Command::Cluster => "cluster",
        Command::TrainBackbone => "train-backbone",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Gradcheck => "gradcheck",
        #[cfg(feature = "stag")]
        Command::ConvertStag(_) => "convert-stag",
    };
    let result = cli.overrides.resolve().and_then(|cfg| match &cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Cluster => commands::cmd_cluster(&cfg),
        Command::TrainBackbone => commands::cmd_train_backbone(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Gradcheck => commands::cmd_gradcheck(&cfg),
        #[cfg(feature = "stag")]
        Command::ConvertStag(args) => tvgcn_cli::npy::cmd_convert_stag(&cfg, args),
    });
    if let Err(e) = result {
        eprintln!("error: {stage}: {e}");
        std::process::exit(1);
    }
}
