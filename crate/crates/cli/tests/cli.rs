//! End-to-end tests of the `gcdt` binary: artifact shapes, exit codes, and
//! recomputation oracles over the emitted CSVs.

use std::path::Path;
use std::process::Command;

fn gcdt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gcdt"))
}

/// Small-but-real config: full feeder13 environment, reduced network and
/// budgets so training runs in seconds.
fn small_config(out_dir: &Path, extra: &str) -> String {
    format!(
        r#"{{
  "feeder": "feeder13",
  "planner": "gcdt",
  "out_dir": "{}",
  "seeds": [0],
  "twin": {{ "hidden_dim": 16, "proj_dim": 8, "width": 16 }},
  "planner_config": {{ "n_simulations": 4, "m_root_samples": 4, "max_depth": 3 }},
  "trainer": {{ "total_env_steps": 480, "batch": 8, "grad_steps_per_episode": 2, "checkpoint_interval": 240 }}{}
}}"#,
        out_dir.display(),
        extra
    )
}

fn write_config(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.trim()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_smoke_emits_at_least_80_rows_on_2k_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.json", &small_config(&out, ""));
    let status = gcdt()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--steps", "2000"])
        .status()
        .unwrap();
    assert!(status.success());

    let rows = read_csv(&out.join("seed_0/metrics.csv"));
    assert_eq!(
        rows[0],
        vec![
            "env_steps",
            "episode_return",
            "loss_total",
            "loss_reward",
            "loss_policy",
            "loss_value",
            "loss_consistency",
            "ts_seconds"
        ]
    );
    assert!(rows.len() - 1 >= 80, "only {} metric rows", rows.len() - 1);
    // env_steps strictly increasing.
    let steps: Vec<usize> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    assert!(out.join("aggregate.csv").exists());
    assert!(out.join("config.json").exists());
}

#[test]
fn aggregate_medians_are_recomputable_from_per_seed_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.json", &small_config(&out, ""));
    let status = gcdt()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seeds", "1,2,3"])
        .status()
        .unwrap();
    assert!(status.success());

    let agg = read_csv(&out.join("aggregate.csv"));
    assert_eq!(
        agg[0],
        vec!["env_steps", "return_median", "return_q25", "return_q75"]
    );
    let seeds = [1u64, 2, 3];
    let per_seed: Vec<Vec<Vec<String>>> = seeds
        .iter()
        .map(|s| read_csv(&out.join(format!("seed_{s}/metrics.csv"))))
        .collect();
    // Independent recomputation: median of the three per-seed returns at
    // each episode index (three values: median is the middle one).
    for (i, row) in agg[1..].iter().enumerate() {
        let mut returns: Vec<f64> = per_seed
            .iter()
            .map(|m| m[1 + i][1].parse::<f64>().unwrap())
            .collect();
        returns.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median: f64 = row[1].parse().unwrap();
        assert!(
            (median - returns[1]).abs() < 1e-9,
            "row {i}: {median} vs {}",
            returns[1]
        );
        let q25: f64 = row[2].parse().unwrap();
        let q75: f64 = row[3].parse().unwrap();
        assert!(q25 <= median && median <= q75);
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();

    // Missing config file.
    let status = gcdt()
        .args(["train", "--config", "/nonexistent/cfg.json"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // Malformed JSON.
    let bad = write_config(tmp.path(), "bad.json", "{ not json");
    let status = gcdt().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(status.status.code(), Some(2));

    // Unknown planner name.
    let status = gcdt()
        .args(["train", "--planner", "greedy", "--steps", "24"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // feeder123 with the default action alphabet exceeds the action-space
    // cap; the diagnostic names the offending product.
    let out = tmp.path().join("f123");
    let cfg = write_config(
        tmp.path(),
        "f123.json",
        &format!(
            r#"{{ "feeder": "feeder123", "out_dir": "{}", "seeds": [0] }}"#,
            out.display()
        ),
    );
    let output = gcdt().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("exceeds cap"), "stderr: {stderr}");

    // Eval without a checkpoint.
    let status = gcdt().args(["eval"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));

    // Bench with a checkpoint trained for a different feeder (dimension
    // mismatch) is a config error as well, exercised in the bench test.
}

#[test]
fn bench_timing_satisfies_the_episode_band() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("train");
    let cfg = write_config(tmp.path(), "cfg.json", &small_config(&out, ""));
    let status = gcdt()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--steps", "240"])
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = out.join("seed_0/ckpt_240.bin");
    assert!(ckpt.exists());

    let bench_out = tmp.path().join("bench");
    let bench_cfg = write_config(
        tmp.path(),
        "bench.json",
        &small_config(
            &bench_out,
            &format!(
                r#",
  "checkpoint": "{}",
  "bench_warmup_episodes": 2,
  "bench_episodes": 8"#,
                ckpt.display()
            ),
        ),
    );
    let status = gcdt().args(["bench", "--config"]).arg(&bench_cfg).status().unwrap();
    assert!(status.success());

    let rows = read_csv(&bench_out.join("bench.csv"));
    assert_eq!(rows.len(), 3, "two planner rows plus header");
    let horizon = 24.0;
    for row in &rows[1..] {
        let ts: f64 = row[3].parse().unwrap();
        let te: f64 = row[5].parse().unwrap();
        assert!(ts > 0.0 && te > 0.0);
        assert!(
            ts * horizon <= te && te <= 1.2 * ts * horizon,
            "planner {}: TS {ts}, TE {te} outside the band",
            row[0]
        );
    }

    // Same checkpoint against a mismatched feeder: config error.
    let mm_cfg = write_config(
        tmp.path(),
        "mismatch.json",
        &small_config(
            &tmp.path().join("mm"),
            &format!(
                r#",
  "checkpoint": "{}""#,
                ckpt.display()
            ),
        )
        .replace("\"feeder\": \"feeder13\"", "\"feeder\": \"feeder34\""),
    );
    let output = gcdt().args(["bench", "--config"]).arg(&mm_cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("mismatch"), "stderr: {stderr}");
}

#[test]
fn eval_report_matches_the_trajectory_log_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("train");
    let cfg = write_config(tmp.path(), "cfg.json", &small_config(&out, ""));
    let status = gcdt()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--steps", "240"])
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = out.join("seed_0/ckpt_240.bin");

    // Loose voltage bounds: violations must be exactly zero.
    let eval_out = tmp.path().join("eval");
    let eval_cfg = write_config(
        tmp.path(),
        "eval.json",
        &small_config(
            &eval_out,
            &format!(
                r#",
  "checkpoint": "{}",
  "env": {{ "v_lower": 0.5, "v_upper": 1.5 }}"#,
                ckpt.display()
            ),
        ),
    );
    let status = gcdt()
        .args(["eval", "--config"])
        .arg(&eval_cfg)
        .args(["--seeds", "101,102"])
        .status()
        .unwrap();
    assert!(status.success());

    let report = read_csv(&eval_out.join("eval_report.csv"));
    assert_eq!(
        report[0],
        vec![
            "planner",
            "n_simulations",
            "episodes",
            "mean_return",
            "mean_violation_pu",
            "mean_loss_fraction"
        ]
    );
    let mean_violation: f64 = report[1][4].parse().unwrap();
    assert_eq!(mean_violation, 0.0, "loose bounds must yield zero violation");

    // Recompute returns from the trajectory log: reward = -(sum of the
    // three components) on every non-failed step, and the report's mean
    // return equals the mean of per-episode reward sums.
    let traj = read_csv(&eval_out.join("eval_trajectories.csv"));
    let mut per_episode: std::collections::BTreeMap<usize, f64> = Default::default();
    for row in &traj[1..] {
        let episode: usize = row[0].parse().unwrap();
        let reward: f64 = row[3].parse().unwrap();
        let comps: f64 = row[4].parse::<f64>().unwrap()
            + row[5].parse::<f64>().unwrap()
            + row[6].parse::<f64>().unwrap();
        let failed: u8 = row[9].parse().unwrap();
        if failed == 0 {
            assert!((reward + comps).abs() < 1e-9, "reward vs components: {row:?}");
        }
        *per_episode.entry(episode).or_insert(0.0) += reward;
    }
    let mean_return: f64 = report[1][3].parse().unwrap();
    let recomputed: f64 =
        per_episode.values().sum::<f64>() / per_episode.len() as f64;
    assert!((mean_return - recomputed).abs() < 1e-9);

    // Determinism: a second identical run produces identical CSVs.
    let eval_out2 = tmp.path().join("eval2");
    let status = gcdt()
        .args(["eval", "--config"])
        .arg(&eval_cfg)
        .args(["--seeds", "101,102", "--out"])
        .arg(&eval_out2)
        .status()
        .unwrap();
    assert!(status.success());
    let a = std::fs::read_to_string(eval_out.join("eval_trajectories.csv")).unwrap();
    let b = std::fs::read_to_string(eval_out2.join("eval_trajectories.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablate_emits_the_planner_by_budget_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.json", &small_config(&out, ""));
    let status = gcdt()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--sims", "2,4", "--steps", "240"])
        .status()
        .unwrap();
    assert!(status.success());

    let rows = read_csv(&out.join("ablation.csv"));
    assert_eq!(
        rows[0],
        vec![
            "planner",
            "n_simulations",
            "return_at_20pct",
            "return_at_40pct",
            "return_at_60pct",
            "return_at_80pct"
        ]
    );
    assert_eq!(rows.len(), 5, "2 planners x 2 budgets plus header");
    let kinds: Vec<(String, String)> = rows[1..]
        .iter()
        .map(|r| (r[0].clone(), r[1].clone()))
        .collect();
    assert_eq!(
        kinds,
        vec![
            ("gcdt".into(), "2".into()),
            ("gcdt".into(), "4".into()),
            ("dt".into(), "2".into()),
            ("dt".into(), "4".into()),
        ]
    );
    // Every cell is a finite return from a real training run.
    for row in &rows[1..] {
        for cell in &row[2..] {
            let v: f64 = cell.parse().unwrap();
            assert!(v.is_finite() && v < 0.0);
        }
    }
}
