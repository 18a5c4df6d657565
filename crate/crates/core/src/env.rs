//! Finite-horizon volt-var control MDP over a feeder.
//!
//! One episode is `horizon` hourly steps. The agent jointly switches
//! capacitors, moves regulator taps, and schedules battery discharge through
//! a single mixed-radix action index; the reward is the negated sum of a
//! power-loss ratio, a voltage-band penalty, and a control-error penalty.

use crate::feeder::{solve_power_flow, DeviceState, FeederError, FeederSpec, PowerFlowSolution};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("action space {detail} = {product} exceeds cap {cap}")]
    ActionSpaceTooLarge {
        detail: String,
        product: u128,
        cap: usize,
    },
    #[error("action index {index} out of range 0..{count}")]
    ActionOutOfRange { index: usize, count: usize },
    #[error("episode is done; call reset")]
    EpisodeDone,
    #[error(transparent)]
    Feeder(#[from] FeederError),
}

/// Penalty coefficients for the three reward terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_power: f64,
    pub w_cap: f64,
    pub w_reg: f64,
    pub w_dis: f64,
    pub w_soc: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_power: 10.0,
            w_cap: 0.1,
            w_reg: 0.01,
            w_dis: 0.1,
            w_soc: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    pub v_lower: f64,
    pub v_upper: f64,
    pub weights: RewardWeights,
    /// Tap positions available as actions, ordered subset of 0..=32.
    pub tap_choices: Vec<u32>,
    /// Discharge levels as positions on the 0..=32 grid, mapped affinely to
    /// [-1, 1] via c/16 - 1.
    pub discharge_choices: Vec<u32>,
    pub load_profile_seed: u64,
    pub obs_stack_depth: usize,
    pub action_space_cap: usize,
    /// Magnitude of the terminal penalty when the power flow fails to
    /// converge; the step reward is its negation.
    pub failure_penalty: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 24,
            v_lower: 0.95,
            v_upper: 1.05,
            weights: RewardWeights::default(),
            tap_choices: vec![0, 8, 16, 24, 32],
            discharge_choices: vec![0, 8, 16, 24, 32],
            load_profile_seed: 0,
            obs_stack_depth: 2,
            action_space_cap: 4096,
            failure_penalty: 10.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self, spec: &FeederSpec) -> Result<(), EnvError> {
        if self.horizon < 1 {
            return Err(EnvError::InvalidConfig("horizon must be >= 1".into()));
        }
        if self.v_lower >= self.v_upper {
            return Err(EnvError::InvalidConfig(format!(
                "v_lower {} must be below v_upper {}",
                self.v_lower, self.v_upper
            )));
        }
        if self.obs_stack_depth < 1 {
            return Err(EnvError::InvalidConfig(
                "obs_stack_depth must be >= 1".into(),
            ));
        }
        let w = &self.weights;
        for (name, v) in [
            ("w_power", w.w_power),
            ("w_cap", w.w_cap),
            ("w_reg", w.w_reg),
            ("w_dis", w.w_dis),
            ("w_soc", w.w_soc),
        ] {
            if v < 0.0 {
                return Err(EnvError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        let check_choices = |name: &str, choices: &[u32]| -> Result<(), EnvError> {
            if choices.is_empty() {
                return Err(EnvError::InvalidConfig(format!("{name} is empty")));
            }
            if !choices.windows(2).all(|w| w[0] < w[1]) {
                return Err(EnvError::InvalidConfig(format!(
                    "{name} must be strictly increasing"
                )));
            }
            if *choices.last().unwrap() > 32 {
                return Err(EnvError::InvalidConfig(format!(
                    "{name} entries must lie in 0..=32"
                )));
            }
            Ok(())
        };
        check_choices("tap_choices", &self.tap_choices)?;
        check_choices("discharge_choices", &self.discharge_choices)?;
        for r in &spec.regulators {
            if u32::from(*self.tap_choices.last().unwrap()) >= r.tap_count {
                return Err(EnvError::InvalidConfig(format!(
                    "tap choice {} outside regulator range 0..{}",
                    self.tap_choices.last().unwrap(),
                    r.tap_count
                )));
            }
        }
        let (product, detail) = action_space_size(spec, self);
        if product > self.action_space_cap as u128 {
            return Err(EnvError::ActionSpaceTooLarge {
                detail,
                product,
                cap: self.action_space_cap,
            });
        }
        Ok(())
    }
}

/// Joint action-space cardinality and a human-readable factorization.
fn action_space_size(spec: &FeederSpec, cfg: &EnvConfig) -> (u128, String) {
    let nc = spec.capacitors.len() as u32;
    let nr = spec.regulators.len() as u32;
    let nb = spec.batteries.len() as u32;
    let t = cfg.tap_choices.len() as u128;
    let d = cfg.discharge_choices.len() as u128;
    let product = 2u128.pow(nc) * t.pow(nr) * d.pow(nb);
    let detail = format!("2^{nc} * {t}^{nr} * {d}^{nb}");
    (product, detail)
}

/// Flat stacked observation vector; see [`Env::obs_len`] for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Index into the joint mixed-radix action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionIndex(pub usize);

/// Per-device decoding of an [`ActionIndex`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceActions {
    pub cap_on: Vec<bool>,
    pub tap: Vec<u32>,
    /// Chosen grid position per battery, from `discharge_choices`.
    pub discharge_choice: Vec<u32>,
    /// Normalized discharge per battery in [-1, 1].
    pub discharge: Vec<f64>,
}

/// Mixed-radix decode; digit order is capacitors, then regulators, then
/// batteries, most-significant digit first.
pub fn decode_action(
    idx: ActionIndex,
    spec: &FeederSpec,
    cfg: &EnvConfig,
) -> Result<DeviceActions, EnvError> {
    let (count, _) = action_space_size(spec, cfg);
    let count = count as usize;
    if idx.0 >= count {
        return Err(EnvError::ActionOutOfRange {
            index: idx.0,
            count,
        });
    }
    let nc = spec.capacitors.len();
    let nr = spec.regulators.len();
    let nb = spec.batteries.len();

    let mut digits = vec![0usize; nc + nr + nb];
    let mut rest = idx.0;
    for pos in (0..digits.len()).rev() {
        let radix = if pos < nc {
            2
        } else if pos < nc + nr {
            cfg.tap_choices.len()
        } else {
            cfg.discharge_choices.len()
        };
        digits[pos] = rest % radix;
        rest /= radix;
    }

    let cap_on = digits[..nc].iter().map(|&d| d == 1).collect();
    let tap = digits[nc..nc + nr]
        .iter()
        .map(|&d| cfg.tap_choices[d])
        .collect();
    let discharge_choice: Vec<u32> = digits[nc + nr..]
        .iter()
        .map(|&d| cfg.discharge_choices[d])
        .collect();
    let discharge = discharge_choice
        .iter()
        .map(|&c| f64::from(c) / 16.0 - 1.0)
        .collect();
    Ok(DeviceActions {
        cap_on,
        tap,
        discharge_choice,
        discharge,
    })
}

/// Inverse of [`decode_action`].
pub fn encode_action(
    actions: &DeviceActions,
    spec: &FeederSpec,
    cfg: &EnvConfig,
) -> Result<ActionIndex, EnvError> {
    let digit_of = |name: &str, choices: &[u32], value: u32| -> Result<usize, EnvError> {
        choices
            .iter()
            .position(|&c| c == value)
            .ok_or_else(|| EnvError::InvalidConfig(format!("{name} value {value} not a choice")))
    };
    if actions.cap_on.len() != spec.capacitors.len()
        || actions.tap.len() != spec.regulators.len()
        || actions.discharge_choice.len() != spec.batteries.len()
    {
        return Err(EnvError::InvalidConfig(
            "device action lengths do not match the feeder".into(),
        ));
    }
    let mut idx = 0usize;
    for &on in &actions.cap_on {
        idx = idx * 2 + usize::from(on);
    }
    for &t in &actions.tap {
        idx = idx * cfg.tap_choices.len() + digit_of("tap", &cfg.tap_choices, t)?;
    }
    for &c in &actions.discharge_choice {
        idx = idx * cfg.discharge_choices.len() + digit_of("discharge", &cfg.discharge_choices, c)?;
    }
    Ok(ActionIndex(idx))
}

/// Result of one environment transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Observation,
    /// u_t = -(power_loss_term + volt_penalty_term + ctrl_error_term) for
    /// converged transitions; -failure_penalty when the solver fails.
    pub reward: f64,
    pub done: bool,
    pub power_loss_term: f64,
    pub volt_penalty_term: f64,
    pub ctrl_error_term: f64,
    pub solver_failed: bool,
}

/// w_power * loss / total, zero when the ratio is undefined.
pub fn power_loss_term(sol: &PowerFlowSolution, w: &RewardWeights) -> f64 {
    if !sol.converged || sol.total_power_pu <= 0.0 {
        return 0.0;
    }
    w.w_power * sol.power_loss_pu / sol.total_power_pu
}

/// Sum over buses of the excursion beyond [v_lower, v_upper], taking the
/// worst phase on each side.
pub fn voltage_penalty_term(sol: &PowerFlowSolution, cfg: &EnvConfig) -> f64 {
    let n = sol.voltage.nrows();
    let mut total = 0.0;
    for b in 0..n {
        let hi = sol.bus_max_voltage(b);
        let lo = sol.bus_min_voltage(b);
        total += (hi - cfg.v_upper).max(0.0) + (cfg.v_lower - lo).max(0.0);
    }
    total
}

/// Switching, tap-movement, discharge, and terminal SOC-restoration
/// penalties. `t` is the time index after the transition; the SOC term
/// applies only at the horizon. Tap movement counts once per phase, and the
/// balanced model moves all three phases together.
pub fn control_error_term(
    prev: &DeviceState,
    next: &DeviceState,
    t: usize,
    cfg: &EnvConfig,
    soc0: &[f64],
) -> f64 {
    let w = &cfg.weights;
    let mut total = 0.0;
    for (&a, &b) in prev.cap_on.iter().zip(&next.cap_on) {
        if a != b {
            total += w.w_cap;
        }
    }
    for (&a, &b) in prev.tap.iter().zip(&next.tap) {
        let delta = f64::from(a.abs_diff(b));
        total += w.w_reg * delta * 3.0;
    }
    for &d in &next.discharge {
        total += w.w_dis * d.max(0.0);
    }
    if t == cfg.horizon {
        for (&s, &s0) in next.soc.iter().zip(soc0) {
            total += w.w_soc * (s - s0).abs();
        }
    }
    total
}

/// Episode state: feeder, config, device state, load profile, frame stack.
#[derive(Debug, Clone)]
pub struct Env {
    spec: FeederSpec,
    cfg: EnvConfig,
    action_count: usize,
    t: usize,
    done: bool,
    dev: DeviceState,
    soc0: Vec<f64>,
    /// (horizon + 1) rows of per-load multipliers, row t used at time t.
    profile: Vec<Vec<f64>>,
    frames: VecDeque<Vec<f64>>,
    last_solution: Option<PowerFlowSolution>,
}

impl Env {
    pub fn new(spec: FeederSpec, cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate(&spec)?;
        let (count, _) = action_space_size(&spec, &cfg);
        Ok(Env {
            action_count: count as usize,
            t: 0,
            done: true,
            dev: spec.neutral_device_state(),
            soc0: vec![0.5; spec.batteries.len()],
            profile: Vec::new(),
            frames: VecDeque::new(),
            last_solution: None,
            spec,
            cfg,
        })
    }

    pub fn spec(&self) -> &FeederSpec {
        &self.spec
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn device_state(&self) -> &DeviceState {
        &self.dev
    }

    pub fn last_solution(&self) -> Option<&PowerFlowSolution> {
        self.last_solution.as_ref()
    }

    /// Length of a single frame: 3 voltages per bus, capacitor states,
    /// normalized taps, SOC, discharge, and a time channel.
    pub fn frame_len(&self) -> usize {
        3 * self.spec.n_bus()
            + self.spec.capacitors.len()
            + self.spec.regulators.len()
            + 2 * self.spec.batteries.len()
            + 1
    }

    fn middle_tap_choices(&self) -> Vec<u32> {
        let mid = self.cfg.tap_choices[self.cfg.tap_choices.len() / 2];
        vec![mid; self.spec.regulators.len()]
    }

    fn build_frame(&self, sol: &PowerFlowSolution) -> Vec<f64> {
        let mut frame = Vec::with_capacity(self.frame_len());
        for b in 0..self.spec.n_bus() {
            for p in 0..3 {
                frame.push(sol.voltage[(b, p)].clamp(0.8, 1.2));
            }
        }
        for &on in &self.dev.cap_on {
            frame.push(f64::from(u8::from(on)));
        }
        for (r, &tap) in self.spec.regulators.iter().zip(&self.dev.tap) {
            frame.push(f64::from(tap) / f64::from(r.tap_count - 1));
        }
        frame.extend_from_slice(&self.dev.soc);
        frame.extend_from_slice(&self.dev.discharge);
        frame.push(self.t as f64 / self.cfg.horizon as f64);
        frame
    }

    fn stacked_observation(&self) -> Observation {
        let mut v = Vec::with_capacity(self.cfg.obs_stack_depth * self.frame_len());
        for f in &self.frames {
            v.extend_from_slice(f);
        }
        Observation(v)
    }

    fn push_frame(&mut self, frame: Vec<f64>) {
        self.frames.push_back(frame);
        while self.frames.len() > self.cfg.obs_stack_depth {
            self.frames.pop_front();
        }
    }

    /// Starts an episode: neutral devices, seed-determined load profile,
    /// observation stack filled by repeating the t=0 frame.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_loads = self.spec.loads.len();
        self.profile = (0..=self.cfg.horizon)
            .map(|t| {
                let diurnal =
                    0.5 * (1.0 - (2.0 * std::f64::consts::PI * t as f64 / 24.0).cos());
                (0..n_loads)
                    .map(|_| 0.6 + 0.4 * diurnal + rng.gen_range(-0.05..0.05))
                    .collect()
            })
            .collect();
        self.t = 0;
        self.done = false;
        self.dev = DeviceState {
            cap_on: vec![false; self.spec.capacitors.len()],
            tap: self.middle_tap_choices(),
            soc: vec![0.5; self.spec.batteries.len()],
            discharge: vec![0.0; self.spec.batteries.len()],
        };
        self.soc0 = self.dev.soc.clone();
        let sol = solve_power_flow(&self.spec, &self.dev, &self.profile[0])
            .expect("validated dimensions");
        let frame = self.build_frame(&sol);
        self.frames.clear();
        for _ in 0..self.cfg.obs_stack_depth {
            self.frames.push_back(frame.clone());
        }
        self.last_solution = Some(sol);
        self.stacked_observation()
    }

    /// Applies one joint action and advances time by one hour.
    pub fn step(&mut self, action: ActionIndex) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let decoded = decode_action(action, &self.spec, &self.cfg)?;
        let prev = self.dev.clone();

        let mut next = DeviceState {
            cap_on: decoded.cap_on,
            tap: decoded.tap,
            soc: prev.soc.clone(),
            discharge: decoded.discharge,
        };
        for (i, batt) in self.spec.batteries.iter().enumerate() {
            let delta = next.discharge[i] * batt.max_discharge_pu / batt.capacity_pu_h;
            next.soc[i] = (prev.soc[i] - delta).clamp(0.0, 1.0);
        }

        let t_new = self.t + 1;
        let sol = solve_power_flow(&self.spec, &next, &self.profile[t_new])?;
        self.dev = next;
        self.t = t_new;

        if !sol.converged {
            self.done = true;
            let frame = self.build_frame(&sol);
            self.push_frame(frame);
            let observation = self.stacked_observation();
            self.last_solution = Some(sol);
            return Ok(StepOutcome {
                observation,
                reward: -self.cfg.failure_penalty,
                done: true,
                power_loss_term: 0.0,
                volt_penalty_term: 0.0,
                ctrl_error_term: 0.0,
                solver_failed: true,
            });
        }

        let p_term = power_loss_term(&sol, &self.cfg.weights);
        let v_term = voltage_penalty_term(&sol, &self.cfg);
        let c_term = control_error_term(&prev, &self.dev, t_new, &self.cfg, &self.soc0);
        self.done = t_new == self.cfg.horizon;

        let frame = self.build_frame(&sol);
        self.push_frame(frame);
        self.last_solution = Some(sol);
        Ok(StepOutcome {
            observation: self.stacked_observation(),
            reward: -(p_term + v_term + c_term),
            done: self.done,
            power_loss_term: p_term,
            volt_penalty_term: v_term,
            ctrl_error_term: c_term,
            solver_failed: false,
        })
    }
}

/// Minimal episodic-environment interface used by the trainer, so the
/// training loop can be exercised on toy problems.
pub trait Environment {
    fn action_count(&self) -> usize;
    fn obs_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: ActionIndex) -> Result<StepOutcome, EnvError>;
}

impl Environment for Env {
    fn action_count(&self) -> usize {
        self.action_count
    }

    fn obs_len(&self) -> usize {
        self.cfg.obs_stack_depth * self.frame_len()
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self, seed: u64) -> Observation {
        Env::reset(self, seed)
    }

    fn step(&mut self, action: ActionIndex) -> Result<StepOutcome, EnvError> {
        Env::step(self, action)
    }
}
