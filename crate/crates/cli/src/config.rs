//! Run configuration: one JSON document carrying every module config plus
//! experiment plumbing (feeder, seeds, output directory, checkpoint).

use gcdt_core::env::EnvConfig;
use gcdt_core::feeder::{bundled_feeder, load_feeder, FeederSpec};
use gcdt_core::planner::{PlannerConfig, PlannerKind};
use gcdt_core::trainer::TrainerConfig;
use gcdt_core::twin::TwinConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or inconsistent configuration: exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Failure while executing a valid configuration: exit code 3.
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundled feeder name (`feeder13`, `feeder34`, `feeder123`) or a path
    /// to a feeder JSON file.
    pub feeder: String,
    pub planner: PlannerKind,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Model checkpoint consumed by `bench` and `eval`.
    pub checkpoint: Option<PathBuf>,
    /// Simulation budgets swept by `ablate`.
    pub ablation_budgets: Vec<usize>,
    pub bench_warmup_episodes: usize,
    pub bench_episodes: usize,
    pub env: EnvConfig,
    pub planner_config: PlannerConfig,
    pub trainer: TrainerConfig,
    pub twin: TwinConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            feeder: "feeder13".to_string(),
            planner: PlannerKind::Gumbel,
            out_dir: PathBuf::from("runs/out"),
            seeds: vec![0],
            checkpoint: None,
            ablation_budgets: vec![4, 8, 16],
            bench_warmup_episodes: 5,
            bench_episodes: 50,
            env: EnvConfig::default(),
            planner_config: PlannerConfig::default(),
            trainer: TrainerConfig::default(),
            twin: TwinConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))
    }

    /// Resolves the feeder field to a parsed spec: bundled name first,
    /// filesystem path otherwise.
    pub fn load_feeder_spec(&self) -> Result<FeederSpec, CliError> {
        if let Ok(spec) = bundled_feeder(&self.feeder) {
            return Ok(spec);
        }
        let text = std::fs::read_to_string(&self.feeder).map_err(|e| {
            CliError::Config(format!(
                "feeder '{}' is neither a bundled name nor a readable file: {e}",
                self.feeder
            ))
        })?;
        load_feeder(&text).map_err(|e| CliError::Config(format!("feeder '{}': {e}", self.feeder)))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list must not be empty".into()));
        }
        if self.ablation_budgets.is_empty() || self.ablation_budgets.iter().any(|&n| n == 0) {
            return Err(CliError::Config(
                "ablation budgets must be nonempty positive integers".into(),
            ));
        }
        if self.bench_episodes == 0 {
            return Err(CliError::Config("bench_episodes must be >= 1".into()));
        }
        self.trainer
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }
}
