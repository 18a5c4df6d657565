//! Planning over the learned latent space.
//!
//! Two planners share one interface. The primary planner samples m root
//! actions without replacement through Gumbel perturbations, spends the
//! simulation budget with sequential halving, and returns an improved
//! policy built from completed action values. The baseline planner is a
//! classic visit-count tree search with an upper-confidence rule and root
//! Dirichlet noise.
//!
//! Both planners are deterministic given the caller's RNG and never touch
//! the real environment: simulations roll the twin's dynamic net forward
//! from the root latent.

use crate::nncore::softmax;
use crate::twin::{TwinError, TwinModel};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error("invalid planner config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Total simulation budget per decision.
    pub n_simulations: usize,
    /// Number of root actions sampled without replacement.
    pub m_root_samples: usize,
    /// Additive visit offset in the value-scaling transform.
    pub c_visit: f64,
    /// Multiplicative scale in the value-scaling transform.
    pub c_scale: f64,
    pub discount: f64,
    /// Depth cap on latent rollouts (also capped by steps left in the
    /// episode).
    pub max_depth: usize,
    /// Exploration constant of the baseline planner.
    pub c_puct: f64,
    /// Root Dirichlet noise of the baseline planner.
    pub dirichlet_alpha: f64,
    pub dirichlet_epsilon: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            n_simulations: 16,
            m_root_samples: 16,
            c_visit: 50.0,
            c_scale: 0.1,
            discount: 0.99,
            max_depth: 6,
            c_puct: 1.25,
            dirichlet_alpha: 0.3,
            dirichlet_epsilon: 0.25,
        }
    }
}

/// Which planner drives acting and training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannerKind {
    /// Gumbel root sampling with sequential halving.
    #[serde(rename = "gcdt")]
    Gumbel,
    /// Visit-count upper-confidence baseline.
    #[serde(rename = "dt")]
    Puct,
}

impl std::str::FromStr for PlannerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcdt" => Ok(PlannerKind::Gumbel),
            "dt" => Ok(PlannerKind::Puct),
            other => Err(format!("unknown planner '{other}' (expected gcdt or dt)")),
        }
    }
}

impl std::fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlannerKind::Gumbel => "gcdt",
            PlannerKind::Puct => "dt",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Action to play at the root.
    pub action: usize,
    /// Training policy target over all actions (sums to 1).
    pub policy: Vec<f64>,
    /// Root value estimate on the raw reward scale.
    pub root_value: f64,
    /// Exactly the configured budget.
    pub simulations_used: usize,
    /// Per-action root visit counts (diagnostics).
    pub root_visit_counts: Vec<u32>,
}

/// Standard-Gumbel sample via inverse transform, guarded away from the
/// endpoints of the uniform draw.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(1e-300, 1.0 - 1e-16);
    -(-u.ln()).ln()
}

/// Top-m actions by Gumbel-perturbed logits: a sample of m distinct actions
/// without replacement from softmax(logits), ordered by perturbed score.
pub fn gumbel_top_m<R: Rng + ?Sized>(logits: &[f64], m: usize, rng: &mut R) -> Vec<usize> {
    let gumbels: Vec<f64> = logits.iter().map(|_| sample_gumbel(rng)).collect();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = gumbels[a] + logits[a];
        let sb = gumbels[b] + logits[b];
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    order.truncate(m.min(logits.len()));
    order
}

/// Monotone map from a normalized value to logit scale, growing with the
/// visit count so that value differences dominate once estimates firm up.
pub fn sigma_transform(q: f64, max_visit_count: u32, cfg: &PlannerConfig) -> f64 {
    (cfg.c_visit + max_visit_count as f64) * cfg.c_scale * q
}

/// Per-action value vector with unvisited entries completed by `fill`.
pub fn completed_q(q_mean: &[f64], visits: &[u32], fill: f64) -> Vec<f64> {
    q_mean
        .iter()
        .zip(visits)
        .map(|(&q, &n)| if n > 0 { q } else { fill })
        .collect()
}

/// Improved policy: softmax of logits shifted by the scaled completed
/// values. Positive everywhere, so it is a usable training target even for
/// actions the search never visited.
pub fn improved_policy(
    logits: &[f64],
    completed_q_norm: &[f64],
    max_visit_count: u32,
    cfg: &PlannerConfig,
) -> Vec<f64> {
    let shifted: Vec<f64> = logits
        .iter()
        .zip(completed_q_norm)
        .map(|(&l, &q)| l + sigma_transform(q, max_visit_count, cfg))
        .collect();
    softmax(&shifted)
}

/// Final root choice among the surviving candidates: argmax of
/// g + logit + scaled value, ties to the lowest action index.
pub fn select_root_action(
    candidates: &[usize],
    gumbels: &[f64],
    logits: &[f64],
    sigma_q: &[f64],
) -> usize {
    let mut best = candidates[0];
    let mut best_score = f64::NEG_INFINITY;
    for &a in candidates {
        let s = gumbels[a] + logits[a] + sigma_q[a];
        if s > best_score || (s == best_score && a < best) {
            best_score = s;
            best = a;
        }
    }
    best
}

/// Deterministic non-root selection: argmax of psi(a) - N(a)/(1 + sum N),
/// ties to the lowest index. Repeated application drives the empirical
/// visit distribution toward psi.
pub fn select_child_nonroot(psi: &[f64], visits: &[u32]) -> usize {
    let total: u32 = visits.iter().sum();
    let denom = 1.0 + total as f64;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (a, (&p, &n)) in psi.iter().zip(visits).enumerate() {
        let s = p - n as f64 / denom;
        if s > best_score {
            best_score = s;
            best = a;
        }
    }
    best
}

/// Sequential-halving phase plan: `(candidate_count, visits_per_candidate)`
/// rows whose total spend never exceeds the budget. The leftover budget is
/// granted to the final phase; any residue smaller than one full round is
/// spent one simulation at a time by the caller.
pub fn sequential_halving_schedule(m: usize, n_simulations: usize) -> Vec<(usize, usize)> {
    assert!(m >= 1 && n_simulations >= 1);
    if m == 1 {
        return vec![(1, n_simulations)];
    }
    let phases = (m as f64).log2().ceil() as usize;
    let mut counts = Vec::with_capacity(phases);
    let mut c = m;
    for _ in 0..phases {
        counts.push(c);
        c = (c / 2).max(1);
    }
    let mut schedule = Vec::with_capacity(phases);
    let mut remaining = n_simulations;
    for (p, &count) in counts.iter().enumerate() {
        let fair = (n_simulations / (phases * count)).max(1);
        let cap = remaining / count;
        let visits = if p + 1 == phases { cap } else { fair.min(cap) };
        schedule.push((count, visits));
        remaining -= count * visits;
    }
    schedule
}

// ---------------------------------------------------------------------------
// Latent tree shared by both planners.

struct Node {
    latent: Array1<f64>,
    /// Reward on the edge from the parent into this node.
    reward_in: f64,
    logits: Vec<f64>,
    /// Softmax of `logits`, filled on first use; only the visit-count
    /// baseline reads priors, so the Gumbel planner never pays for them.
    priors: Option<Vec<f64>>,
    value: f64,
    depth: usize,
    children: Vec<Option<usize>>,
    edge_visits: Vec<u32>,
    edge_q_sum: Vec<f64>,
}

struct Tree {
    nodes: Vec<Node>,
    min_q: f64,
    max_q: f64,
}

impl Tree {
    fn new() -> Tree {
        Tree {
            nodes: Vec::new(),
            min_q: f64::INFINITY,
            max_q: f64::NEG_INFINITY,
        }
    }

    fn push_node(
        &mut self,
        latent: Array1<f64>,
        reward_in: f64,
        logits: Vec<f64>,
        value: f64,
        depth: usize,
    ) -> usize {
        let a = logits.len();
        self.nodes.push(Node {
            latent,
            reward_in,
            logits,
            priors: None,
            value,
            depth,
            children: vec![None; a],
            edge_visits: vec![0; a],
            edge_q_sum: vec![0.0; a],
        });
        self.nodes.len() - 1
    }

    fn ensure_priors(&mut self, node: usize) {
        if self.nodes[node].priors.is_none() {
            self.nodes[node].priors = Some(softmax(&self.nodes[node].logits));
        }
    }

    /// Min-max normalization over every value backed up anywhere in the
    /// tree; collapses to 0 before two distinct values exist.
    fn normalize(&self, q: f64) -> f64 {
        let span = self.max_q - self.min_q;
        if span <= 1e-12 {
            0.0
        } else {
            (q - self.min_q) / span
        }
    }

    fn observe(&mut self, q: f64) {
        self.min_q = self.min_q.min(q);
        self.max_q = self.max_q.max(q);
    }

    fn expand_child(
        &mut self,
        model: &TwinModel,
        parent: usize,
        action: usize,
    ) -> Result<usize, PlannerError> {
        let (reward, latent) = model.dynamics(&self.nodes[parent].latent, action)?;
        let (logits, value) = model.predict(&latent)?;
        let depth = self.nodes[parent].depth + 1;
        let idx = self.push_node(latent, reward, logits, value, depth);
        self.nodes[parent].children[action] = Some(idx);
        Ok(idx)
    }

    /// Discounted backup of a leaf value along a root-to-leaf edge path.
    fn backup(&mut self, path: &[(usize, usize)], leaf_value: f64, discount: f64) {
        let mut g = leaf_value;
        for &(node, action) in path.iter().rev() {
            let child = self.nodes[node].children[action].expect("edge on backup path");
            g = self.nodes[child].reward_in + discount * g;
            self.nodes[node].edge_q_sum[action] += g;
            self.nodes[node].edge_visits[action] += 1;
            self.observe(g);
        }
    }

    fn edge_q_mean(&self, node: usize, action: usize) -> f64 {
        let n = self.nodes[node].edge_visits[action];
        if n == 0 {
            0.0
        } else {
            self.nodes[node].edge_q_sum[action] / n as f64
        }
    }

    /// Normalized completed values and max visit count at a node.
    fn completed_norm_at(&self, node: usize) -> (Vec<f64>, u32) {
        let n = &self.nodes[node];
        let max_n = n.edge_visits.iter().copied().max().unwrap_or(0);
        let fill = self.normalize(n.value);
        let q: Vec<f64> = (0..n.edge_visits.len())
            .map(|a| {
                if n.edge_visits[a] > 0 {
                    self.normalize(self.edge_q_mean(node, a))
                } else {
                    fill
                }
            })
            .collect();
        (q, max_n)
    }
}

fn expand_root(
    tree: &mut Tree,
    model: &TwinModel,
    obs: &[f64],
) -> Result<usize, PlannerError> {
    let latent = model.represent(obs)?;
    let (logits, value) = model.predict(&latent)?;
    Ok(tree.push_node(latent, 0.0, logits, value, 0))
}

/// Outcome of one read-only forced descent: either an unexpanded edge
/// waiting for a network evaluation, or a depth-capped leaf whose stored
/// value backs up as-is.
enum ForcedDescent {
    Expand {
        path: Vec<(usize, usize)>,
        parent: usize,
        action: usize,
    },
    Capped {
        path: Vec<(usize, usize)>,
        leaf_value: f64,
    },
}

/// Follows the deterministic non-root rule from a forced root action until
/// it reaches an unexpanded edge or the depth cap. Pure tree walk.
fn forced_descent(
    tree: &Tree,
    root_action: usize,
    depth_cap: usize,
    cfg: &PlannerConfig,
) -> ForcedDescent {
    let mut path: Vec<(usize, usize)> = Vec::new();
    let mut node = 0usize;
    let mut action = root_action;
    loop {
        path.push((node, action));
        match tree.nodes[node].children[action] {
            None => {
                return ForcedDescent::Expand {
                    path,
                    parent: node,
                    action,
                };
            }
            Some(child) => {
                if tree.nodes[child].depth >= depth_cap {
                    return ForcedDescent::Capped {
                        path,
                        leaf_value: tree.nodes[child].value,
                    };
                }
                let (completed, max_n) = tree.completed_norm_at(child);
                let psi = improved_policy(&tree.nodes[child].logits, &completed, max_n, cfg);
                action = select_child_nonroot(&psi, &tree.nodes[child].edge_visits);
                node = child;
            }
        }
    }
}

/// One simulation for each listed root candidate. The candidates' subtrees
/// are disjoint, so given the tree state at the wave start the descents are
/// independent and their expansions share one batched dynamics call and one
/// batched prediction call; backups then apply in candidate order. This
/// root-level batching is structural to the candidate-sampling planner: the
/// visit-count baseline selects each simulation from the previous one's
/// backup and cannot batch the same way.
fn run_wave(
    tree: &mut Tree,
    model: &TwinModel,
    candidates: &[usize],
    depth_cap: usize,
    cfg: &PlannerConfig,
) -> Result<(), PlannerError> {
    let descents: Vec<ForcedDescent> = candidates
        .iter()
        .map(|&a| forced_descent(tree, a, depth_cap, cfg))
        .collect();

    let pending: Vec<usize> = descents
        .iter()
        .enumerate()
        .filter(|(_, d)| matches!(d, ForcedDescent::Expand { .. }))
        .map(|(i, _)| i)
        .collect();
    let mut created: Vec<Option<usize>> = vec![None; descents.len()];
    if !pending.is_empty() {
        let mut latents = Array2::zeros((pending.len(), model.hidden_dim));
        let mut hots = Vec::with_capacity(pending.len());
        for (row, &i) in pending.iter().enumerate() {
            let ForcedDescent::Expand { parent, action, .. } = &descents[i] else {
                unreachable!("pending holds only expansions");
            };
            latents.row_mut(row).assign(&tree.nodes[*parent].latent);
            hots.push(*action);
        }
        let (rewards, next) = model.dynamics_batch(&latents, &hots)?;
        let (logits, values) = model.predict_batch(&next)?;
        for (row, &i) in pending.iter().enumerate() {
            let ForcedDescent::Expand { parent, action, .. } = &descents[i] else {
                unreachable!("pending holds only expansions");
            };
            let depth = tree.nodes[*parent].depth + 1;
            let idx = tree.push_node(
                next.row(row).to_owned(),
                rewards[row],
                logits.row(row).to_vec(),
                values[row],
                depth,
            );
            tree.nodes[*parent].children[*action] = Some(idx);
            created[i] = Some(idx);
        }
    }

    for (i, d) in descents.iter().enumerate() {
        match d {
            ForcedDescent::Expand { path, .. } => {
                let child = created[i].expect("expansion created above");
                let v = tree.nodes[child].value;
                tree.backup(path, v, cfg.discount);
            }
            ForcedDescent::Capped { path, leaf_value } => {
                tree.backup(path, *leaf_value, cfg.discount);
            }
        }
    }
    Ok(())
}

fn validate(cfg: &PlannerConfig) -> Result<(), PlannerError> {
    if cfg.n_simulations == 0 {
        return Err(PlannerError::Config("n_simulations must be >= 1".into()));
    }
    if cfg.m_root_samples == 0 {
        return Err(PlannerError::Config("m_root_samples must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.discount) {
        return Err(PlannerError::Config("discount must lie in [0, 1]".into()));
    }
    if cfg.max_depth == 0 {
        return Err(PlannerError::Config("max_depth must be >= 1".into()));
    }
    Ok(())
}

/// Gumbel root-sampling search. `remaining_steps` caps rollout depth at
/// the true episode end so late-episode plans never cross it.
pub fn run_search<R: Rng + ?Sized>(
    obs: &[f64],
    model: &TwinModel,
    remaining_steps: usize,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<SearchResult, PlannerError> {
    validate(cfg)?;
    let a_count = model.action_count;
    let depth_cap = cfg.max_depth.min(remaining_steps).max(1);

    let mut tree = Tree::new();
    expand_root(&mut tree, model, obs)?;
    let root_logits = tree.nodes[0].logits.clone();

    // One Gumbel per action, drawn once and reused for every phase.
    let gumbels: Vec<f64> = (0..a_count).map(|_| sample_gumbel(rng)).collect();
    let m = cfg.m_root_samples.min(a_count);
    let by_gumbel_score = |&x: &usize, &y: &usize| {
        let sx = gumbels[x] + root_logits[x];
        let sy = gumbels[y] + root_logits[y];
        sy.partial_cmp(&sx).unwrap().then(x.cmp(&y))
    };
    let mut order: Vec<usize> = (0..a_count).collect();
    if m < a_count {
        order.select_nth_unstable_by(m - 1, by_gumbel_score);
    }
    order.truncate(m);
    order.sort_by(by_gumbel_score);
    let mut candidates = order;

    // Root candidate score used for halving cuts and the final choice.
    let root_scores = |tree: &Tree, cands: &[usize]| -> Vec<f64> {
        let root = &tree.nodes[0];
        let max_n = root.edge_visits.iter().copied().max().unwrap_or(0);
        let fill = tree.normalize(root.value);
        cands
            .iter()
            .map(|&a| {
                let q = if root.edge_visits[a] > 0 {
                    tree.normalize(tree.edge_q_mean(0, a))
                } else {
                    fill
                };
                gumbels[a] + root_logits[a] + sigma_transform(q, max_n, cfg)
            })
            .collect()
    };

    let schedule = sequential_halving_schedule(m, cfg.n_simulations);
    let mut used = 0usize;
    for (p, &(_, visits)) in schedule.iter().enumerate() {
        for _ in 0..visits {
            run_wave(&mut tree, model, &candidates, depth_cap, cfg)?;
            used += candidates.len();
        }
        if p + 1 < schedule.len() {
            let keep = schedule[p + 1].0;
            let scores = root_scores(&tree, &candidates);
            let mut idx: Vec<usize> = (0..candidates.len()).collect();
            idx.sort_by(|&x, &y| {
                scores[y]
                    .partial_cmp(&scores[x])
                    .unwrap()
                    .then(candidates[x].cmp(&candidates[y]))
            });
            candidates = idx.into_iter().take(keep).map(|i| candidates[i]).collect();
        }
    }

    // Spend any residue one simulation at a time over the finalists, in
    // their Gumbel-score order.
    let mut i = 0usize;
    while used < cfg.n_simulations {
        let a = candidates[i % candidates.len()];
        run_wave(&mut tree, model, &[a], depth_cap, cfg)?;
        used += 1;
        i += 1;
    }

    // Final action among the finalists.
    let (completed_norm, max_n) = tree.completed_norm_at(0);
    let sigma_q: Vec<f64> = completed_norm
        .iter()
        .map(|&q| sigma_transform(q, max_n, cfg))
        .collect();
    let action = select_root_action(&candidates, &gumbels, &root_logits, &sigma_q);

    // Improved policy over every action and the raw-scale root value.
    let policy = improved_policy(&root_logits, &completed_norm, max_n, cfg);
    let root = &tree.nodes[0];
    let root_value: f64 = (0..a_count)
        .map(|a| {
            let q_raw = if root.edge_visits[a] > 0 {
                tree.edge_q_mean(0, a)
            } else {
                root.value
            };
            policy[a] * q_raw
        })
        .sum();

    Ok(SearchResult {
        action,
        policy,
        root_value,
        simulations_used: used,
        root_visit_counts: root.edge_visits.clone(),
    })
}

/// Visit-count upper-confidence baseline with root Dirichlet noise; same
/// interface and budget accounting as the primary planner.
pub fn run_puct_search<R: Rng + ?Sized>(
    obs: &[f64],
    model: &TwinModel,
    remaining_steps: usize,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<SearchResult, PlannerError> {
    validate(cfg)?;
    let a_count = model.action_count;
    let depth_cap = cfg.max_depth.min(remaining_steps).max(1);

    let mut tree = Tree::new();
    expand_root(&mut tree, model, obs)?;
    tree.ensure_priors(0);
    if a_count >= 2 && cfg.dirichlet_epsilon > 0.0 {
        let dir = rand_distr::Dirichlet::new(&vec![cfg.dirichlet_alpha; a_count])
            .map_err(|e| PlannerError::Config(format!("dirichlet: {e}")))?;
        let noise = dir.sample(rng);
        let eps = cfg.dirichlet_epsilon;
        for (p, n) in tree.nodes[0]
            .priors
            .as_mut()
            .expect("root priors ensured")
            .iter_mut()
            .zip(noise)
        {
            *p = (1.0 - eps) * *p + eps * n;
        }
    }

    let select_ucb = |tree: &Tree, node: usize| -> usize {
        let n = &tree.nodes[node];
        let priors = n.priors.as_ref().expect("priors ensured before selection");
        let total: u32 = n.edge_visits.iter().sum();
        let sqrt_total = (total as f64).sqrt();
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for a in 0..n.edge_visits.len() {
            let q = if n.edge_visits[a] > 0 {
                tree.normalize(tree.edge_q_mean(node, a))
            } else {
                0.0
            };
            let u = cfg.c_puct * priors[a] * sqrt_total / (1.0 + n.edge_visits[a] as f64);
            let s = q + u;
            if s > best_score {
                best_score = s;
                best = a;
            }
        }
        best
    };

    for _ in 0..cfg.n_simulations {
        let mut path: Vec<(usize, usize)> = Vec::new();
        let mut node = 0usize;
        loop {
            tree.ensure_priors(node);
            let action = select_ucb(&tree, node);
            path.push((node, action));
            match tree.nodes[node].children[action] {
                None => {
                    tree.expand_child(model, node, action)?;
                    let child = tree.nodes[node].children[action].unwrap();
                    let v = tree.nodes[child].value;
                    tree.backup(&path, v, cfg.discount);
                    break;
                }
                Some(child) => {
                    if tree.nodes[child].depth >= depth_cap {
                        let v = tree.nodes[child].value;
                        tree.backup(&path, v, cfg.discount);
                        break;
                    }
                    node = child;
                }
            }
        }
    }

    let root = &tree.nodes[0];
    let total: u32 = root.edge_visits.iter().sum();
    let policy: Vec<f64> = root
        .edge_visits
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect();
    let root_value: f64 = (0..a_count)
        .filter(|&a| root.edge_visits[a] > 0)
        .map(|a| policy[a] * tree.edge_q_mean(0, a))
        .sum();

    // Acting samples from the visit distribution.
    let draw: f64 = rng.gen();
    let mut cum = 0.0;
    let mut action = a_count - 1;
    for (a, &p) in policy.iter().enumerate() {
        cum += p;
        if draw < cum {
            action = a;
            break;
        }
    }

    Ok(SearchResult {
        action,
        policy,
        root_value,
        simulations_used: cfg.n_simulations,
        root_visit_counts: root.edge_visits.clone(),
    })
}

/// Dispatch on planner kind with a shared signature.
pub fn plan<R: Rng + ?Sized>(
    kind: PlannerKind,
    obs: &[f64],
    model: &TwinModel,
    remaining_steps: usize,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<SearchResult, PlannerError> {
    match kind {
        PlannerKind::Gumbel => run_search(obs, model, remaining_steps, cfg, rng),
        PlannerKind::Puct => run_puct_search(obs, model, remaining_steps, cfg, rng),
    }
}
