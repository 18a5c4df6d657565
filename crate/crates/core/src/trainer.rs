//! Self-play training loop.
//!
//! Episodes are generated by planning against the current model, stored in
//! a FIFO episode replay buffer together with n-step value targets computed
//! at storage time, and consumed as anchored unroll windows by the twin
//! loss. One metrics row is emitted per episode; checkpoints are written
//! whenever the cumulative environment step count crosses a multiple of the
//! checkpoint interval.

use crate::env::{ActionIndex, EnvError, Environment};
use crate::nncore::SgdMomentum;
use crate::planner::{plan, PlannerConfig, PlannerError, PlannerKind};
use crate::twin::{
    save_checkpoint, unrolled_loss, LossWeights, TwinConfig, TwinError, TwinModel, UnrollBatch,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid trainer config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub discount: f64,
    /// Lookahead of the n-step value targets.
    pub n_step: usize,
    /// Unroll length K of the training windows.
    pub unroll: usize,
    pub batch: usize,
    pub grad_steps_per_episode: usize,
    pub total_env_steps: usize,
    /// Replay capacity in episodes.
    pub replay_capacity: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Coefficient of the squared-norm regularizer.
    pub l2: f64,
    /// Checkpoint every this many environment steps.
    pub checkpoint_interval: usize,
    /// Backward scale across each latent unroll boundary.
    pub latent_grad_scale: f64,
    pub loss_weights: LossWeights,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            discount: 0.99,
            n_step: 5,
            unroll: 5,
            batch: 64,
            grad_steps_per_episode: 40,
            total_env_steps: 20_000,
            replay_capacity: 500,
            learning_rate: 0.02,
            momentum: 0.9,
            l2: 1e-4,
            checkpoint_interval: 5_000,
            latent_grad_scale: 0.5,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.to_string()));
        if self.n_step == 0 || self.unroll == 0 || self.batch == 0 {
            return bad("n_step, unroll and batch must be >= 1");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1]");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One environment transition with its search policy target.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub obs: Vec<f64>,
    pub policy: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// Undiscounted sum of rewards.
    pub episode_return: f64,
    pub id: u64,
}

/// Episode plus the value targets frozen at storage time.
#[derive(Debug, Clone)]
pub struct StoredEpisode {
    pub trajectory: Trajectory,
    pub value_targets: Vec<f64>,
}

/// FIFO ring of whole episodes.
#[derive(Debug)]
pub struct ReplayBuffer {
    episodes: VecDeque<StoredEpisode>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity >= 1);
        ReplayBuffer {
            episodes: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, episode: StoredEpisode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.trajectory.steps.len()).sum()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &StoredEpisode> {
        self.episodes.iter()
    }
}

/// Plays one full episode with the given planner, collecting search
/// policies as training targets. The episode seed is drawn from `rng`.
pub fn self_play_episode<E: Environment + ?Sized, R: Rng + ?Sized>(
    env: &mut E,
    model: &TwinModel,
    kind: PlannerKind,
    pcfg: &PlannerConfig,
    rng: &mut R,
    id: u64,
) -> Result<Trajectory, TrainerError> {
    let episode_seed: u64 = rng.gen();
    let mut obs = env.reset(episode_seed);
    let horizon = env.horizon();
    let mut steps = Vec::with_capacity(horizon);
    let mut episode_return = 0.0;
    for t in 0..horizon {
        let res = plan(kind, &obs.0, model, horizon - t, pcfg, rng)?;
        let out = env.step(ActionIndex(res.action))?;
        episode_return += out.reward;
        steps.push(TrajectoryStep {
            obs: obs.0.clone(),
            policy: res.policy,
            action: res.action,
            reward: out.reward,
            next_obs: out.observation.0.clone(),
        });
        obs = out.observation;
        if out.done {
            break;
        }
    }
    Ok(Trajectory {
        steps,
        episode_return,
        id,
    })
}

/// n-step value targets: discounted rewards for up to `n_step` steps, then
/// a bootstrap from the model's value head, truncated at the episode end
/// (the terminal state has value zero).
pub fn compute_value_targets(
    trajectory: &Trajectory,
    model: &TwinModel,
    n_step: usize,
    discount: f64,
) -> Result<Vec<f64>, TrainerError> {
    let t_len = trajectory.steps.len();
    if t_len == 0 {
        return Ok(Vec::new());
    }
    // Bootstrap values at every step's observation in one batch.
    let obs_dim = trajectory.steps[0].obs.len();
    let mut obs = Array2::zeros((t_len, obs_dim));
    for (i, s) in trajectory.steps.iter().enumerate() {
        for (j, &v) in s.obs.iter().enumerate() {
            obs[(i, j)] = v;
        }
    }
    let values = model.values_from_obs(&obs)?;

    let mut z = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let k = n_step.min(t_len - t);
        let mut target = 0.0;
        let mut gamma_i = 1.0;
        for i in 0..k {
            target += gamma_i * trajectory.steps[t + i].reward;
            gamma_i *= discount;
        }
        if t + k < t_len {
            target += gamma_i * values[t + k];
        }
        z.push(target);
    }
    Ok(z)
}

/// Uniformly samples `batch` anchored K-step windows over every stored
/// step. Windows crossing the episode end are zero-padded with mask 0.
pub fn sample_batch<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<UnrollBatch, TrainerError> {
    if buffer.is_empty() {
        return Err(TrainerError::Config("empty replay buffer".into()));
    }
    let total = buffer.total_steps();
    let episodes: Vec<&StoredEpisode> = buffer.episodes().collect();
    let first = &episodes[0].trajectory.steps[0];
    let obs_dim = first.obs.len();
    let a_count = first.policy.len();
    let b = cfg.batch;
    let k_len = cfg.unroll;

    let mut obs = Array2::zeros((b, obs_dim));
    let mut actions = Array2::zeros((b, k_len));
    let mut rewards = Array2::zeros((b, k_len));
    let mut values = Array2::zeros((b, k_len));
    let mut mask = Array2::zeros((b, k_len));
    let mut policies = vec![Array2::zeros((b, a_count)); k_len];
    let mut next_obs = vec![Array2::zeros((b, obs_dim)); k_len];

    for row in 0..b {
        // Uniform over all (episode, step) anchor pairs.
        let mut pick = rng.gen_range(0..total);
        let mut ep = 0usize;
        while pick >= episodes[ep].trajectory.steps.len() {
            pick -= episodes[ep].trajectory.steps.len();
            ep += 1;
        }
        let episode = episodes[ep];
        let t = pick;
        let t_len = episode.trajectory.steps.len();

        for (j, &v) in episode.trajectory.steps[t].obs.iter().enumerate() {
            obs[(row, j)] = v;
        }
        for k in 0..k_len {
            if t + k >= t_len {
                break; // remaining columns stay zero with mask 0
            }
            let step = &episode.trajectory.steps[t + k];
            mask[(row, k)] = 1.0;
            actions[(row, k)] = step.action;
            rewards[(row, k)] = step.reward;
            values[(row, k)] = episode.value_targets[t + k];
            for (j, &v) in step.policy.iter().enumerate() {
                policies[k][(row, j)] = v;
            }
            for (j, &v) in step.next_obs.iter().enumerate() {
                next_obs[k][(row, j)] = v;
            }
        }
    }

    Ok(UnrollBatch {
        obs,
        actions,
        rewards,
        policies,
        values,
        next_obs,
        mask,
    })
}

/// One row per completed episode; losses are means over that episode's
/// gradient steps and exclude the regularizer term.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub env_steps: usize,
    pub episode_return: f64,
    pub loss_total: f64,
    pub loss_reward: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_consistency: f64,
    pub ts_seconds: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "env_steps,episode_return,loss_total,loss_reward,loss_policy,loss_value,loss_consistency,ts_seconds";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.env_steps,
            self.episode_return,
            self.loss_total,
            self.loss_reward,
            self.loss_policy,
            self.loss_value,
            self.loss_consistency,
            self.ts_seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub model: TwinModel,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Stream-separated deterministic seed derivation.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Momentum optimizer state for all five twin networks.
pub struct Optimizers {
    pub transform: SgdMomentum,
    pub dynamic: SgdMomentum,
    pub predict: SgdMomentum,
    pub proj_target: SgdMomentum,
    pub proj_online: SgdMomentum,
}

impl Optimizers {
    pub fn new(model: &TwinModel, cfg: &TrainerConfig) -> Optimizers {
        let make = |net| SgdMomentum::new(net, cfg.learning_rate, cfg.momentum, cfg.l2);
        Optimizers {
            transform: make(&model.transform),
            dynamic: make(&model.dynamic),
            predict: make(&model.predict),
            proj_target: make(&model.proj_target),
            proj_online: make(&model.proj_online),
        }
    }

    /// One optimizer step from a full set of twin gradients.
    pub fn apply(&mut self, model: &mut TwinModel, grads: &crate::twin::TwinGradients) {
        self.transform.step(&mut model.transform, &grads.transform);
        self.dynamic.step(&mut model.dynamic, &grads.dynamic);
        self.predict.step(&mut model.predict, &grads.predict);
        self.proj_target.step(&mut model.proj_target, &grads.proj_target);
        self.proj_online.step(&mut model.proj_online, &grads.proj_online);
    }
}

/// Interleaved self-play training. When `out_dir` is given, a `metrics.csv`
/// and `ckpt_<envsteps>.bin` files are written there.
pub fn train_loop(
    env: &mut dyn Environment,
    kind: PlannerKind,
    pcfg: &PlannerConfig,
    tcfg: &TrainerConfig,
    twin_cfg: &TwinConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainerError> {
    tcfg.validate()?;
    let mut model = TwinModel::new(
        env.obs_len(),
        env.action_count(),
        twin_cfg,
        mix_seed(seed, 1),
    );
    let mut opts = Optimizers::new(&model, tcfg);
    let mut play_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3));
    let mut buffer = ReplayBuffer::new(tcfg.replay_capacity);

    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(f, "{METRICS_CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut env_steps = 0usize;
    let mut episode_id = 0u64;
    let mut next_ckpt = tcfg.checkpoint_interval;

    while env_steps < tcfg.total_env_steps {
        let trajectory = self_play_episode(env, &model, kind, pcfg, &mut play_rng, episode_id)?;
        env_steps += trajectory.steps.len();
        let episode_return = trajectory.episode_return;
        let value_targets =
            compute_value_targets(&trajectory, &model, tcfg.n_step, tcfg.discount)?;
        buffer.push(StoredEpisode {
            trajectory,
            value_targets,
        });

        let mut acc = [0.0f64; 5]; // total(excl l2), reward, policy, value, consistency
        for _ in 0..tcfg.grad_steps_per_episode {
            let batch = sample_batch(&buffer, tcfg, &mut sample_rng)?;
            let (bd, grads) = unrolled_loss(
                &model,
                &batch,
                &tcfg.loss_weights,
                tcfg.l2,
                tcfg.latent_grad_scale,
            )?;
            opts.apply(&mut model, &grads);
            acc[0] += bd.reward + bd.policy + bd.value + bd.consistency;
            acc[1] += bd.reward;
            acc[2] += bd.policy;
            acc[3] += bd.value;
            acc[4] += bd.consistency;
        }
        let denom = tcfg.grad_steps_per_episode.max(1) as f64;
        let row = MetricsRow {
            env_steps,
            episode_return,
            loss_total: acc[0] / denom,
            loss_reward: acc[1] / denom,
            loss_policy: acc[2] / denom,
            loss_value: acc[3] / denom,
            loss_consistency: acc[4] / denom,
            ts_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.to_csv_line())?;
            f.flush()?;
        }
        metrics.push(row);
        episode_id += 1;

        if tcfg.checkpoint_interval > 0 && env_steps >= next_ckpt {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("ckpt_{env_steps}.bin"));
                let mut f = BufWriter::new(File::create(&path)?);
                save_checkpoint(&mut f, &model, &tcfg.loss_weights)?;
                checkpoint_paths.push(path);
            }
            while next_ckpt <= env_steps {
                next_ckpt += tcfg.checkpoint_interval;
            }
        }
    }

    // Final checkpoint if the last crossing did not land exactly here.
    if let Some(dir) = out_dir {
        let path = dir.join(format!("ckpt_{env_steps}.bin"));
        if !checkpoint_paths.last().map(|p| p == &path).unwrap_or(false) {
            let mut f = BufWriter::new(File::create(&path)?);
            save_checkpoint(&mut f, &model, &tcfg.loss_weights)?;
            checkpoint_paths.push(path);
        }
    }

    Ok(TrainOutcome {
        metrics,
        model,
        checkpoint_paths,
    })
}
