mod artifacts;
mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "teb", version, about = "GP-learned tracking error bounds, safe planning and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect residuals from the truth model and fit the GP band and the conservative box.
    FitGp(Common),
    /// Solve the tracking game and extract the TEB.
    SolveHji(Common),
    /// Augment obstacles by the TEB and plan.
    Plan(Common),
    /// One closed-loop rollout along the plan against the truth model.
    Simulate(Common),
    /// Monte-Carlo containment study from random initial states in the TEB.
    Study(Common),
    /// Full GP and conservative pipelines, comparison figures and a feasibility verdict.
    ReproduceSim1(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Multiply every grid node count.
    #[arg(long)]
    pub grid_scale: Option<f64>,
    /// Band as a two-sided coverage probability.
    #[arg(long, conflicts_with = "sigma_mult")]
    pub p: Option<f64>,
    /// Band as a multiple of the posterior standard deviation.
    #[arg(long)]
    pub sigma_mult: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Disturbance description for solve-hji, plan, simulate and study.
    #[arg(long, value_parser = ["gp", "conservative"], default_value = "gp")]
    pub uncertainty: String,
    /// Disturbance source for study.
    #[arg(long, value_parser = ["truth", "in-band-worst"], default_value = "truth")]
    pub source: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::FitGp(c) => commands::fit_gp(c),
        Command::SolveHji(c) => commands::solve_hji(c),
        Command::Plan(c) => commands::plan(c),
        Command::Simulate(c) => commands::simulate(c),
        Command::Study(c) => commands::study(c),
        Command::ReproduceSim1(c) => commands::reproduce_sim1(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("teb: {message}");
            ExitCode::from(code)
        }
    }
}
