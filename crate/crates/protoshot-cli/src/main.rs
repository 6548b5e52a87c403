//! Experiment front end: episodic meta-training, baselines, evaluation
//! protocols, hyperparameter grids, synthetic data generation, and a
//! gradient self-check, all driven by flat key=value config files.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::RunInputs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "protoshot",
    version,
    about = "Few-shot adaptation experiments over small differentiable encoders"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Path to a key=value run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Directory for artifacts (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Extra KEY=VALUE pairs applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn inputs(&self) -> RunInputs {
        RunInputs {
            config_path: self.config.clone(),
            out_dir: self.out.clone(),
            overrides: self.overrides.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Episodic meta-training with per-epoch validation and early stopping.
    MetaTrain(RunArgs),
    /// Evaluate a checkpoint on the target groups under the support-based
    /// protocol.
    MetaTest {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Non-episodic supervised training on the pooled auxiliary groups.
    BaselineTrain(RunArgs),
    /// Supervised training on the source group plus direct (no-adaptation)
    /// evaluation on the targets.
    ZeroShot(RunArgs),
    /// Rank the hyperparameter grid for the configured algorithm by
    /// validation loss.
    GridSearch(RunArgs),
    /// Generate the configured synthetic dataset as JSONL.
    SynthGen(RunArgs),
    /// Run the finite-difference gradient check suite.
    Gradcheck {
        /// Seed for the randomized check instances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn dispatch(cmd: &Cmd) -> protoshot::Result<i32> {
    match cmd {
        Cmd::MetaTrain(args) => commands::cmd_meta_train(&args.inputs()),
        Cmd::MetaTest { run, checkpoint } => commands::cmd_meta_test(&run.inputs(), checkpoint),
        Cmd::BaselineTrain(args) => commands::cmd_baseline_train(&args.inputs()),
        Cmd::ZeroShot(args) => commands::cmd_zero_shot(&args.inputs()),
        Cmd::GridSearch(args) => commands::cmd_grid_search(&args.inputs()),
        Cmd::SynthGen(args) => commands::cmd_synth_gen(&args.inputs()),
        Cmd::Gradcheck { seed } => commands::cmd_gradcheck(*seed),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(&cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_like() {
                2
            } else {
                3
            }
        }
    };
    std::process::exit(code);
}
