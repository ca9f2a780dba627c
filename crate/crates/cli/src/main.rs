//! Command-line experiment runner: one JSON config in, artifacts out.
//! Exit codes: 0 ok, 2 config problem, 3 missing upstream artifact,
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowdistill::config::ExperimentConfig;
use flowdistill::pipeline::Pipeline;
use flowdistill::Error;

/// Wall-clock repeats for the `speed` command.
const SPEED_REPEATS: usize = 100;

#[derive(Parser)]
#[command(name = "flowdistill", version, about = "Flow-matching teacher, one-step distilled student, latency-aware rollouts")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Overrides the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Lets gen-data overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render expert demos and holdout scenes.
    GenData,
    /// Train the CFM teacher on the demo corpus.
    TrainTeacher,
    /// Sample teacher trajectory sets over the holdout scenes.
    SampleTeacher,
    /// Distill the one-step student with set-level IMLE.
    Distill,
    /// Set-level metrics for teacher and student.
    Eval,
    /// Closed-loop rollouts; sweeps orbit speeds on dynamic tasks.
    Simulate,
    /// Wall-clock planning latency, teacher vs student.
    Speed,
    /// K and T_e ablation sweeps.
    Ablate,
}

fn run(cli: Cli) -> flowdistill::Result<()> {
    let config_path = cli.config.ok_or_else(|| Error::Config {
        field: "config".to_string(),
        reason: "pass --config PATH".to_string(),
    })?;
    let mut cfg = ExperimentConfig::load(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.unwrap_or_else(|| cfg.output.clone());
    let mut p = Pipeline::new(cfg, out)?;
    match cli.cmd {
        Cmd::GenData => p.gen_data(cli.force),
        Cmd::TrainTeacher => p.train_teacher(),
        Cmd::SampleTeacher => p.sample_teacher(),
        Cmd::Distill => p.distill(),
        Cmd::Eval => p.eval(),
        Cmd::Simulate => p.simulate(),
        Cmd::Speed => p.speed(SPEED_REPEATS),
        Cmd::Ablate => p.ablate(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowdistill: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => 2u8,
                Error::MissingArtifact { .. } => 3,
                _ => 1,
            })
        }
    }
}
