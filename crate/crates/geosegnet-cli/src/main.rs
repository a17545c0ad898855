//! Argument parsing and exit-code mapping for the `geosegnet` binary.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geosegnet::boundary::DEFAULT_BOUNDARY_RADIUS;
use geosegnet::Error;
use geosegnet_cli::commands;
use geosegnet_cli::config::Overrides;

#[derive(Parser)]
#[command(
    name = "geosegnet",
    version,
    about = "Geometry-aware point cloud semantic segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled scene from a spec file.
    Gen {
        /// Scene spec file.
        spec: PathBuf,
        /// Output point file (x y z r g b label).
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's generation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export per-point geometric descriptors as a CSV table.
    Features {
        /// Labeled point file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Neighborhood size.
        #[arg(long, default_value_t = 16)]
        k: usize,
    },
    /// Mark class-boundary points and save them in the prediction column.
    Boundary {
        /// Labeled point file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output point file with the boundary flag as the last column.
        #[arg(long)]
        out: PathBuf,
        /// Neighborhood radius for boundary mining.
        #[arg(long, default_value_t = DEFAULT_BOUNDARY_RADIUS)]
        radius: f64,
    },
    /// Train a network per an experiment config file.
    Train {
        /// Experiment config file.
        config: PathBuf,
        /// Override the checkpoint output path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the training-log CSV path.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override the per-stage loss weight.
        #[arg(long)]
        lambda1: Option<f64>,
        /// Override the boundary-contrast loss weight.
        #[arg(long)]
        lambda2: Option<f64>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Evaluate a checkpoint on labeled scenes.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled scenes to score; repeatable.
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Check analytic gradients of every differentiable building block.
    Gradcheck {
        /// Seed for the probe data.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Retrain over a grid of auxiliary-loss weights and report holdout
    /// metrics per cell.
    Sweep {
        /// Experiment config file.
        config: PathBuf,
        /// Per-stage loss weights to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        lambda1: Vec<f64>,
        /// Boundary-contrast loss weights to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        lambda2: Vec<f64>,
        /// Also write the metrics table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

/// Config knobs that may be overridden from the command line.
#[derive(Args, Debug, Default)]
struct OverrideArgs {
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the first receptive field's neighbor count.
    #[arg(long)]
    k1: Option<usize>,
    /// Override the second receptive field's neighbor count.
    #[arg(long)]
    k2: Option<usize>,
    /// Override the boundary-contrast temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the batch size.
    #[arg(long)]
    batch: Option<usize>,
}

impl OverrideArgs {
    fn into_overrides(self, lambda1: Option<f64>, lambda2: Option<f64>) -> Overrides {
        Overrides {
            seed: self.seed,
            k1: self.k1,
            k2: self.k2,
            lambda1,
            lambda2,
            tau: self.tau,
            epochs: self.epochs,
            batch: self.batch,
        }
    }
}

fn run(cli: Cli) -> geosegnet::Result<()> {
    match cli.command {
        Command::Gen { spec, out, seed } => commands::gen(&spec, &out, seed),
        Command::Features { input, out, k } => commands::features(&input, &out, k),
        Command::Boundary { input, out, radius } => commands::boundary(&input, &out, radius),
        Command::Train {
            config,
            checkpoint,
            log,
            lambda1,
            lambda2,
            overrides,
        } => commands::train(
            &config,
            &overrides.into_overrides(lambda1, lambda2),
            checkpoint.as_deref(),
            log.as_deref(),
        ),
        Command::Eval { checkpoint, inputs } => commands::eval(&checkpoint, &inputs),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::Sweep {
            config,
            lambda1,
            lambda2,
            out,
            overrides,
        } => commands::sweep(
            &config,
            &lambda1,
            &lambda2,
            out.as_deref(),
            &overrides.into_overrides(None, None),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Io { .. } => 2,
                Error::Parse { .. } | Error::Config(_) => 3,
                Error::ClassCountMismatch { .. } => 4,
                _ => 1,
            })
        }
    }
}
