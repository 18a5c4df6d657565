//! The four experiment drivers: train, ablate, bench, eval.
//!
//! Every run lays its artifacts under the configured output directory and
//! all randomness is derived from the configured seeds, so reruns with the
//! same config are reproducible (bench wall-clock fields aside).

use crate::config::{CliError, RunConfig};
use gcdt_core::env::{ActionIndex, Env, Environment};
use gcdt_core::feeder::FeederSpec;
use gcdt_core::planner::{plan, PlannerConfig, PlannerKind};
use gcdt_core::trainer::{mix_seed, train_loop, MetricsRow, TrainOutcome};
use gcdt_core::twin::{load_checkpoint, TwinModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

fn make_env(cfg: &RunConfig, spec: &FeederSpec) -> Result<Env, CliError> {
    Env::new(spec.clone(), cfg.env.clone()).map_err(|e| CliError::Config(e.to_string()))
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("mkdir {}: {e}", path.display())))
}

/// Dumps the fully resolved config next to the artifacts it produced.
fn dump_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| CliError::Runtime(format!("serialize config: {e}")))?;
    write_file(&dir.join("config.json"), &text)
}

/// Linear-interpolation quantile of an already sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[n - 1]
    }
}

fn median_usize(values: &mut [usize]) -> usize {
    values.sort_unstable();
    values[values.len() / 2]
}

fn run_one_training(
    cfg: &RunConfig,
    spec: &FeederSpec,
    kind: PlannerKind,
    pcfg: &PlannerConfig,
    seed: u64,
    dir: &Path,
) -> Result<TrainOutcome, CliError> {
    let mut env = make_env(cfg, spec)?;
    train_loop(
        &mut env,
        kind,
        pcfg,
        &cfg.trainer,
        &cfg.twin,
        seed,
        Some(dir),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Trains one run per seed and aggregates episode returns across seeds
/// (median and quartiles per episode index).
pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.load_feeder_spec()?;
    create_dir(&cfg.out_dir)?;
    dump_config(cfg, &cfg.out_dir)?;

    let mut per_seed: Vec<Vec<MetricsRow>> = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.out_dir.join(format!("seed_{seed}"));
        let outcome = run_one_training(cfg, &spec, cfg.planner, &cfg.planner_config, seed, &dir)?;
        println!(
            "seed {seed}: {} episodes, {} env steps, final return {:.4}",
            outcome.metrics.len(),
            outcome.metrics.last().map(|m| m.env_steps).unwrap_or(0),
            outcome
                .metrics
                .last()
                .map(|m| m.episode_return)
                .unwrap_or(f64::NAN),
        );
        per_seed.push(outcome.metrics);
    }

    let rows = per_seed.iter().map(|m| m.len()).min().unwrap_or(0);
    let path = cfg.out_dir.join("aggregate.csv");
    let mut f = BufWriter::new(
        File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
    );
    writeln!(f, "env_steps,return_median,return_q25,return_q75")
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for i in 0..rows {
        let mut steps: Vec<usize> = per_seed.iter().map(|m| m[i].env_steps).collect();
        let mut returns: Vec<f64> = per_seed.iter().map(|m| m[i].episode_return).collect();
        returns.sort_by(|a, b| a.partial_cmp(b).unwrap());
        writeln!(
            f,
            "{},{},{},{}",
            median_usize(&mut steps),
            quantile(&returns, 0.5),
            quantile(&returns, 0.25),
            quantile(&returns, 0.75),
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Mean episode return over the window of (up to) 20 episodes ending at
/// the last episode whose cumulative step count is <= `mark`.
fn return_at_checkpoint(metrics: &[MetricsRow], mark: usize) -> f64 {
    let upto: Vec<&MetricsRow> = metrics.iter().filter(|m| m.env_steps <= mark).collect();
    if upto.is_empty() {
        return f64::NAN;
    }
    let w = upto.len().min(20);
    let tail = &upto[upto.len() - w..];
    tail.iter().map(|m| m.episode_return).sum::<f64>() / w as f64
}

/// Grid over both planners and the configured simulation budgets; each
/// cell reports the across-seed median of windowed returns at 20/40/60/80%
/// of the step budget.
pub fn cmd_ablate(cfg: &RunConfig, budgets: &[usize]) -> Result<(), CliError> {
    let spec = cfg.load_feeder_spec()?;
    create_dir(&cfg.out_dir)?;
    dump_config(cfg, &cfg.out_dir)?;
    let fractions = [0.2, 0.4, 0.6, 0.8];
    let total = cfg.trainer.total_env_steps;

    let path = cfg.out_dir.join("ablation.csv");
    let mut f = BufWriter::new(
        File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
    );
    writeln!(
        f,
        "planner,n_simulations,return_at_20pct,return_at_40pct,return_at_60pct,return_at_80pct"
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    for kind in [PlannerKind::Gumbel, PlannerKind::Puct] {
        for &n in budgets {
            let pcfg = PlannerConfig {
                n_simulations: n,
                ..cfg.planner_config.clone()
            };
            let mut per_seed: Vec<Vec<MetricsRow>> = Vec::new();
            for &seed in &cfg.seeds {
                let dir = cfg
                    .out_dir
                    .join(format!("ablate_{kind}_n{n}"))
                    .join(format!("seed_{seed}"));
                let outcome = run_one_training(cfg, &spec, kind, &pcfg, seed, &dir)?;
                per_seed.push(outcome.metrics);
            }
            let cells: Vec<f64> = fractions
                .iter()
                .map(|&frac| {
                    let mark = (total as f64 * frac) as usize;
                    let mut vals: Vec<f64> = per_seed
                        .iter()
                        .map(|m| return_at_checkpoint(m, mark))
                        .collect();
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    quantile(&vals, 0.5)
                })
                .collect();
            writeln!(
                f,
                "{kind},{n},{},{},{},{}",
                cells[0], cells[1], cells[2], cells[3]
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("ablate {kind} n={n}: checkpoint returns {cells:?}");
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn load_model_for(cfg: &RunConfig, env: &Env) -> Result<TwinModel, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("this subcommand requires a checkpoint".into()))?;
    let mut f = File::open(path)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
    let (model, _) = load_checkpoint(&mut f)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
    if model.obs_dim != env.obs_len() || model.action_count != env.action_count() {
        return Err(CliError::Config(format!(
            "checkpoint/feeder mismatch: model expects obs {} / actions {}, environment provides obs {} / actions {}",
            model.obs_dim,
            model.action_count,
            env.obs_len(),
            env.action_count()
        )));
    }
    Ok(model)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Wall-clock timing of acting with a trained model: TS is the mean time
/// per environment step including search, TE the mean time per full
/// episode. Both planners are measured at the same budget.
pub fn cmd_bench(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.load_feeder_spec()?;
    create_dir(&cfg.out_dir)?;
    let mut env = make_env(cfg, &spec)?;
    let model = load_model_for(cfg, &env)?;
    let pcfg = &cfg.planner_config;
    let seed0 = cfg.seeds[0];

    let path = cfg.out_dir.join("bench.csv");
    let mut f = BufWriter::new(
        File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
    );
    writeln!(
        f,
        "planner,n_simulations,episodes,ts_mean_seconds,ts_std_seconds,te_mean_seconds,te_std_seconds"
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    for kind in [PlannerKind::Gumbel, PlannerKind::Puct] {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed0, 0xBE2C));
        let mut step_times: Vec<f64> = Vec::new();
        let mut episode_times: Vec<f64> = Vec::new();
        let total_episodes = cfg.bench_warmup_episodes + cfg.bench_episodes;
        for episode in 0..total_episodes {
            let warm = episode < cfg.bench_warmup_episodes;
            let t_ep = Instant::now();
            let mut obs = env.reset(rng.gen());
            let horizon = env.horizon();
            for t in 0..horizon {
                let t_step = Instant::now();
                let res = plan(kind, obs.as_slice(), &model, horizon - t, pcfg, &mut rng)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                let out = env
                    .step(ActionIndex(res.action))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                if !warm {
                    step_times.push(t_step.elapsed().as_secs_f64());
                }
                obs = out.observation;
                if out.done {
                    break;
                }
            }
            if !warm {
                episode_times.push(t_ep.elapsed().as_secs_f64());
            }
        }
        let (ts_mean, ts_std) = mean_std(&step_times);
        let (te_mean, te_std) = mean_std(&episode_times);
        writeln!(
            f,
            "{kind},{},{},{ts_mean},{ts_std},{te_mean},{te_std}",
            pcfg.n_simulations,
            episode_times.len()
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        println!(
            "bench {kind} n={}: TS {:.6}s (sd {:.6}), TE {:.6}s (sd {:.6}) over {} episodes",
            pcfg.n_simulations,
            ts_mean,
            ts_std,
            te_mean,
            te_std,
            episode_times.len()
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Greedy evaluation of a checkpoint: one episode per configured seed,
/// acting with the argmax of the search policy. Emits a per-step
/// trajectory log and a summary report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.load_feeder_spec()?;
    create_dir(&cfg.out_dir)?;
    let mut env = make_env(cfg, &spec)?;
    let model = load_model_for(cfg, &env)?;
    let pcfg = &cfg.planner_config;
    let n_bus = spec.n_bus();

    let traj_path = cfg.out_dir.join("eval_trajectories.csv");
    let mut tf = BufWriter::new(
        File::create(&traj_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", traj_path.display())))?,
    );
    writeln!(
        tf,
        "episode,t,action,reward,power_loss_term,volt_penalty_term,ctrl_error_term,min_voltage,max_voltage,solver_failed"
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut returns = Vec::new();
    let mut violations = Vec::new();
    let mut loss_fractions = Vec::new();
    for (episode, &seed) in cfg.seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE7A1));
        let mut obs = env.reset(mix_seed(seed, 0x0B5E));
        let horizon = env.horizon();
        let mut ep_return = 0.0;
        for t in 0..horizon {
            let res = plan(cfg.planner, obs.as_slice(), &model, horizon - t, pcfg, &mut rng)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let action = argmax(&res.policy);
            let out = env
                .step(ActionIndex(action))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            ep_return += out.reward;
            violations.push(out.volt_penalty_term);
            loss_fractions.push(out.power_loss_term / cfg.env.weights.w_power);
            let (vmin, vmax) = match env.last_solution() {
                Some(sol) => {
                    let lo = (0..n_bus)
                        .map(|b| sol.bus_min_voltage(b))
                        .fold(f64::INFINITY, f64::min);
                    let hi = (0..n_bus)
                        .map(|b| sol.bus_max_voltage(b))
                        .fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi)
                }
                None => (f64::NAN, f64::NAN),
            };
            writeln!(
                tf,
                "{episode},{t},{action},{},{},{},{},{vmin},{vmax},{}",
                out.reward,
                out.power_loss_term,
                out.volt_penalty_term,
                out.ctrl_error_term,
                u8::from(out.solver_failed)
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            obs = out.observation;
            if out.done {
                break;
            }
        }
        returns.push(ep_return);
    }

    let report_path = cfg.out_dir.join("eval_report.csv");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mut rf = BufWriter::new(
        File::create(&report_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", report_path.display())))?,
    );
    writeln!(
        rf,
        "planner,n_simulations,episodes,mean_return,mean_violation_pu,mean_loss_fraction"
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(
        rf,
        "{},{},{},{},{},{}",
        cfg.planner,
        pcfg.n_simulations,
        returns.len(),
        mean(&returns),
        mean(&violations),
        mean(&loss_fractions)
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "eval: {} episodes, mean return {:.4}, mean violation {:.6} pu, mean loss fraction {:.6}",
        returns.len(),
        mean(&returns),
        mean(&violations),
        mean(&loss_fractions)
    );
    println!("wrote {} and {}", traj_path.display(), report_path.display());
    Ok(())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
