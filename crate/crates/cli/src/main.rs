//! `gcdt` — benchmark harness for the digital-twin voltage-control agent.
//!
//! Subcommands: `train` (self-play training per seed plus an aggregate
//! curve), `ablate` (planner x simulation-budget grid), `bench` (TS/TE
//! wall-clock timing of a checkpoint), `eval` (greedy evaluation report).
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::{CliError, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "gcdt", version, about = "Digital-twin voltage-control benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and aggregate the reward curves.
    Train(CommonArgs),
    /// Sweep both planners over simulation budgets.
    Ablate(CommonArgs),
    /// Time steps and episodes of a trained checkpoint.
    Bench(CommonArgs),
    /// Evaluate a checkpoint greedily on held-out seeds.
    Eval(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundled feeder name or path to a feeder JSON file.
    #[arg(long)]
    feeder: Option<String>,
    /// Planner kind: gcdt | dt.
    #[arg(long)]
    planner: Option<String>,
    /// Simulation budget; for `ablate`, a comma-separated list.
    #[arg(long)]
    sims: Option<String>,
    /// Comma-separated seed list, e.g. 0,1,2.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total environment steps per training run.
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| CliError::Config(format!("cannot parse {what} entry '{s}'")))
        })
        .collect()
}

/// Loads the config file (or defaults) and applies flag overrides.
fn resolve(args: &CommonArgs, sims_is_list: bool) -> Result<(RunConfig, Vec<usize>), CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(feeder) = &args.feeder {
        cfg.feeder = feeder.clone();
    }
    if let Some(planner) = &args.planner {
        cfg.planner = planner.parse().map_err(CliError::Config)?;
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = parse_list(seeds, "seed")?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(steps) = args.steps {
        cfg.trainer.total_env_steps = steps;
    }
    let mut budgets = cfg.ablation_budgets.clone();
    if let Some(sims) = &args.sims {
        let list: Vec<usize> = parse_list(sims, "simulation count")?;
        if list.is_empty() || list.iter().any(|&n| n == 0) {
            return Err(CliError::Config(
                "simulation counts must be positive".into(),
            ));
        }
        if sims_is_list {
            budgets = list;
        } else {
            if list.len() != 1 {
                return Err(CliError::Config(
                    "this subcommand takes a single --sims value".into(),
                ));
            }
            cfg.planner_config.n_simulations = list[0];
        }
    }
    cfg.ablation_budgets = budgets.clone();
    cfg.validate()?;
    Ok((cfg, budgets))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(args) => {
            let (cfg, _) = resolve(args, false)?;
            commands::cmd_train(&cfg)
        }
        Command::Ablate(args) => {
            let (cfg, budgets) = resolve(args, true)?;
            commands::cmd_ablate(&cfg, &budgets)
        }
        Command::Bench(args) => {
            let (cfg, _) = resolve(args, false)?;
            commands::cmd_bench(&cfg)
        }
        Command::Eval(args) => {
            let (cfg, _) = resolve(args, false)?;
            commands::cmd_eval(&cfg)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
