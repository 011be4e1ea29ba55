use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seda_cli::commands;

#[derive(Parser)]
#[command(
    name = "seda",
    version,
    about = "Feature diffusion experiments: generate data, train, evaluate, sample, plot"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-feature dataset (train.emb and test.emb)
    Generate {
        /// Run configuration file
        #[arg(long)]
        config: PathBuf,
        /// Directory to write train.emb and test.emb into
        #[arg(long)]
        out: PathBuf,
        /// Override the run seed (beats SEDA_SEED and the config key)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and save one checkpoint per epoch
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (uses train.emb) or a dataset file
        #[arg(long)]
        data: PathBuf,
        /// Directory for epoch checkpoints
        #[arg(long)]
        out: PathBuf,
        /// Ablation arm: base, T, TI, or TIL
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a test split and write a report
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file to evaluate
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (uses test.emb) or a dataset file
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON report
        #[arg(long)]
        report: PathBuf,
        /// Must match the arm the checkpoint was trained with
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate the one-step feed-forward control arm
    Baseline {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory holding train.emb and test.emb
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON report destination (metrics print either way)
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the reverse chain over a dataset and save the aligned features
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (uses test.emb) or a dataset file
        #[arg(long)]
        data: PathBuf,
        /// Output dataset file for the aligned features
        #[arg(long)]
        out: PathBuf,
        /// Posterior noise multiplier (0 gives the deterministic chain)
        #[arg(long, default_value_t = 1.0)]
        noise_scale: f64,
        /// Visit every k-th step of the chain
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Defaults to the seed recorded in the checkpoint
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the plots a report supports (confusion, trajectory, projection)
    Plot {
        #[arg(long)]
        report: PathBuf,
        /// Directory for the PNG files
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // usage problems exit 2, --help and --version exit 0
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Generate { config, out, seed } => commands::generate(config, out, *seed),
        Command::Train {
            config,
            data,
            out,
            ablation,
            seed,
        } => commands::train(config, data, out, ablation.as_deref(), *seed),
        Command::Eval {
            config,
            ckpt,
            data,
            report,
            ablation,
            seed,
        } => commands::eval(config, ckpt, data, report, ablation.as_deref(), *seed),
        Command::Baseline {
            config,
            data,
            report,
            seed,
        } => commands::baseline(config, data, report.as_deref(), *seed),
        Command::Sample {
            ckpt,
            data,
            out,
            noise_scale,
            stride,
            seed,
        } => commands::sample(ckpt, data, out, *noise_scale, *stride, *seed),
        Command::Plot { report, out } => commands::plot(report, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
