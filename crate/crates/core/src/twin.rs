//! The digital-twin world model.
//!
//! Three learned maps share one latent space of dimension `hidden_dim`:
//! a transform net embeds observation stacks, a dynamic net advances the
//! latent under a one-hot action while emitting a reward, and a predict net
//! reads out policy logits and a value. Two small projection heads produce
//! the consistency targets and predictions: the target branch P1 is applied
//! to latents of *real* next observations and treated as a constant (no
//! gradient flows into it), the online branch P2 to latents reached through
//! the dynamic net.
//!
//! Latents are bounded in (-1,1): the transform net ends in tanh, and the
//! twin applies tanh to the dynamic net's latent slice (the reward slot
//! stays linear).

use crate::nncore::{
    loss_cross_entropy, loss_kl, loss_mse, read_net, softmax, write_net, Activation, DenseNet,
    GradientTape, NnError,
};
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("action {index} out of range 0..{count}")]
    InvalidAction { index: usize, count: usize },
    #[error("inconsistent unroll batch: {0}")]
    BadBatch(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    pub hidden_dim: usize,
    pub proj_dim: usize,
    /// Width of the single hidden layer in the transform/dynamic/predict
    /// trunks.
    pub width: usize,
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig {
            hidden_dim: 64,
            proj_dim: 32,
            width: 64,
        }
    }
}

/// Weights on the four loss terms: reward, policy, value, consistency.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub reward: f64,
    pub policy: f64,
    pub value: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reward: 1.0,
            policy: 1.0,
            value: 0.25,
            consistency: 2.0,
        }
    }
}

/// Model parameters. `Clone` is the snapshot mechanism: planners hold a
/// cloned snapshot while the trainer mutates the live copy.
#[derive(Debug, Clone)]
pub struct TwinModel {
    pub transform: DenseNet,
    pub dynamic: DenseNet,
    pub predict: DenseNet,
    pub proj_target: DenseNet,
    pub proj_online: DenseNet,
    pub obs_dim: usize,
    pub action_count: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
}

impl TwinModel {
    pub fn new(obs_dim: usize, action_count: usize, cfg: &TwinConfig, seed: u64) -> TwinModel {
        assert!(obs_dim > 0 && action_count > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_dim;
        let w = cfg.width;
        TwinModel {
            transform: DenseNet::new(
                &[obs_dim, w, h],
                &[Activation::Relu, Activation::Tanh],
                &mut rng,
            ),
            dynamic: DenseNet::new(
                &[h + action_count, w, 1 + h],
                &[Activation::Relu, Activation::Identity],
                &mut rng,
            ),
            predict: DenseNet::new(
                &[h, w, action_count + 1],
                &[Activation::Relu, Activation::Identity],
                &mut rng,
            ),
            proj_target: DenseNet::new(&[h, cfg.proj_dim], &[Activation::Identity], &mut rng),
            proj_online: DenseNet::new(&[h, cfg.proj_dim], &[Activation::Identity], &mut rng),
            obs_dim,
            action_count,
            hidden_dim: h,
            proj_dim: cfg.proj_dim,
        }
    }

    /// Hash of the dimension signature, stored in checkpoints so a model
    /// cannot be silently loaded against a mismatched feeder or config.
    pub fn config_hash(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for v in [
            self.obs_dim as u64,
            self.action_count as u64,
            self.hidden_dim as u64,
            self.proj_dim as u64,
        ] {
            hash ^= v;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }

    /// Embeds one observation stack into the latent space.
    pub fn represent(&self, obs: &[f64]) -> Result<Array1<f64>, TwinError> {
        Ok(Array1::from_vec(self.transform.forward_one(obs)?))
    }

    pub fn represent_batch(&self, obs: &Array2<f64>) -> Result<Array2<f64>, TwinError> {
        Ok(self.transform.forward(obs)?)
    }

    /// Advances the latent one step under an action: (reward, next latent).
    pub fn dynamics(&self, h: &Array1<f64>, action: usize) -> Result<(f64, Array1<f64>), TwinError> {
        if action >= self.action_count {
            return Err(TwinError::InvalidAction {
                index: action,
                count: self.action_count,
            });
        }
        let out = self
            .dynamic
            .forward_one_hot(h.as_slice().expect("contiguous latent"), action)?;
        let reward = out[0];
        let h_next = Array1::from_iter(out[1..].iter().map(|&v| v.tanh()));
        Ok((reward, h_next))
    }

    /// Batched [`Self::dynamics`]: row i of `latents` advances under
    /// `actions[i]`. Returns per-row rewards and next latents.
    pub fn dynamics_batch(
        &self,
        latents: &Array2<f64>,
        actions: &[usize],
    ) -> Result<(Array1<f64>, Array2<f64>), TwinError> {
        if let Some(&bad) = actions.iter().find(|&&a| a >= self.action_count) {
            return Err(TwinError::InvalidAction {
                index: bad,
                count: self.action_count,
            });
        }
        let out = self.dynamic.forward_batch_hot(latents, actions)?;
        let rewards = out.column(0).to_owned();
        let next = out.slice(ndarray::s![.., 1..]).mapv(f64::tanh);
        Ok((rewards, next))
    }

    /// Batched [`Self::predict`]: logits matrix and value vector for a batch
    /// of latents.
    pub fn predict_batch(&self, latents: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>), TwinError> {
        let out = self.predict.forward(latents)?;
        let logits = out.slice(ndarray::s![.., ..self.action_count]).to_owned();
        let values = out.column(self.action_count).to_owned();
        Ok((logits, values))
    }

    /// Reads policy logits over all actions and a scalar value.
    pub fn predict(&self, h: &Array1<f64>) -> Result<(Vec<f64>, f64), TwinError> {
        let out = self
            .predict
            .forward_one(h.as_slice().expect("contiguous latent"))?;
        let value = out[self.action_count];
        let mut logits = out;
        logits.truncate(self.action_count);
        Ok((logits, value))
    }

    /// Values v(represent(obs)) for a batch of observation stacks.
    pub fn values_from_obs(&self, obs: &Array2<f64>) -> Result<Array1<f64>, TwinError> {
        let h = self.represent_batch(obs)?;
        let out = self.predict.forward(&h)?;
        Ok(out.column(self.action_count).to_owned())
    }
}

/// B anchored K-step windows with targets; rows past an episode's end carry
/// mask 0 and arbitrary (zero) payload.
#[derive(Debug, Clone)]
pub struct UnrollBatch {
    /// (B, obs_dim) observation stacks at the anchors.
    pub obs: Array2<f64>,
    /// (B, K) action indices a_{t..t+K-1}.
    pub actions: Array2<usize>,
    /// (B, K) observed rewards u.
    pub rewards: Array2<f64>,
    /// K matrices of shape (B, action_count): search policies at t..t+K-1.
    pub policies: Vec<Array2<f64>>,
    /// (B, K) n-step value targets z.
    pub values: Array2<f64>,
    /// K matrices of shape (B, obs_dim): stacks at t+1..t+K.
    pub next_obs: Vec<Array2<f64>>,
    /// (B, K) validity: 1.0 inside the episode, 0.0 padding.
    pub mask: Array2<f64>,
}

impl UnrollBatch {
    pub fn batch_size(&self) -> usize {
        self.obs.nrows()
    }

    pub fn unroll_len(&self) -> usize {
        self.actions.ncols()
    }

    fn validate(&self, model: &TwinModel) -> Result<(), TwinError> {
        let b = self.batch_size();
        let k = self.unroll_len();
        let bad = |what: &str| Err(TwinError::BadBatch(what.to_string()));
        if k == 0 {
            return bad("zero unroll length");
        }
        if self.obs.ncols() != model.obs_dim {
            return bad("obs width != model obs_dim");
        }
        if self.rewards.dim() != (b, k) || self.values.dim() != (b, k) || self.mask.dim() != (b, k)
        {
            return bad("reward/value/mask shape");
        }
        if self.policies.len() != k || self.next_obs.len() != k {
            return bad("policies/next_obs length != K");
        }
        for p in &self.policies {
            if p.dim() != (b, model.action_count) {
                return bad("policy target shape");
            }
        }
        for o in &self.next_obs {
            if o.dim() != (b, model.obs_dim) {
                return bad("next_obs shape");
            }
        }
        if self.actions.iter().any(|&a| a >= model.action_count) {
            return bad("action index out of range");
        }
        if self
            .mask
            .iter()
            .any(|&m| m != 0.0 && m != 1.0)
        {
            return bad("mask entries must be 0 or 1");
        }
        Ok(())
    }
}

/// Weighted loss components; `total` is their exact sum.
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub reward: f64,
    pub policy: f64,
    pub value: f64,
    pub consistency: f64,
    pub l2: f64,
}

/// Gradients for all five networks.
#[derive(Debug)]
pub struct TwinGradients {
    pub transform: GradientTape,
    pub dynamic: GradientTape,
    pub predict: GradientTape,
    pub proj_target: GradientTape,
    pub proj_online: GradientTape,
}

/// Cross-entropy between the frozen target projection of `h_true` and the
/// online projection of `h_pred`. Returns the loss, the gradient tape for
/// the online projection head, and the gradient w.r.t. `h_pred`.
pub fn consistency_loss(
    model: &TwinModel,
    h_pred: &Array1<f64>,
    h_true: &Array1<f64>,
) -> Result<(f64, GradientTape, Array1<f64>), TwinError> {
    let target_logits = model
        .proj_target
        .forward_one(h_true.as_slice().expect("contiguous latent"))?;
    let target = softmax(&target_logits);

    let row = h_pred.view().insert_axis(Axis(0)).to_owned();
    let cache = model.proj_online.forward_cached(&row)?;
    let pred_logits = cache.output().row(0).to_vec();
    let (value, dlogits) = loss_cross_entropy(&pred_logits, &target)?;
    let upstream = Array2::from_shape_vec((1, dlogits.len()), dlogits).expect("shape");
    let (tape, dx) = model.proj_online.backward(&cache, &upstream)?;
    Ok((value, tape, dx.row(0).to_owned()))
}

/// Frozen consistency targets: softmax(P1(represent(next_obs_k))) for each
/// unroll step. Computing these up front is what makes the target branch a
/// constant during differentiation.
pub fn consistency_targets(
    model: &TwinModel,
    batch: &UnrollBatch,
) -> Result<Vec<Array2<f64>>, TwinError> {
    let mut targets = Vec::with_capacity(batch.next_obs.len());
    for obs_k in &batch.next_obs {
        let h_true = model.represent_batch(obs_k)?;
        let logits = model.proj_target.forward(&h_true)?;
        let mut t = Array2::zeros(logits.raw_dim());
        for (b, row) in logits.outer_iter().enumerate() {
            let sm = softmax(row.as_slice().expect("standard layout"));
            for (j, v) in sm.into_iter().enumerate() {
                t[(b, j)] = v;
            }
        }
        targets.push(t);
    }
    Ok(targets)
}

/// Full unrolled training loss and gradients.
///
/// `l2_coeff` is the c of the c*||theta||^2 regularizer over all five nets.
/// `latent_grad_scale` multiplies the gradient flowing backward across each
/// dynamic-net latent output (1.0 = exact gradient, 0.5 = the stabilized
/// training default).
pub fn unrolled_loss(
    model: &TwinModel,
    batch: &UnrollBatch,
    w: &LossWeights,
    l2_coeff: f64,
    latent_grad_scale: f64,
) -> Result<(LossBreakdown, TwinGradients), TwinError> {
    let targets = if w.consistency != 0.0 {
        Some(consistency_targets(model, batch)?)
    } else {
        None
    };
    unrolled_loss_with_targets(model, batch, w, l2_coeff, latent_grad_scale, targets.as_deref())
}

/// As [`unrolled_loss`] but with externally supplied (already frozen)
/// consistency targets, which makes the stop-gradient semantics explicit
/// and finite-difference checkable.
pub fn unrolled_loss_with_targets(
    model: &TwinModel,
    batch: &UnrollBatch,
    w: &LossWeights,
    l2_coeff: f64,
    latent_grad_scale: f64,
    targets: Option<&[Array2<f64>]>,
) -> Result<(LossBreakdown, TwinGradients), TwinError> {
    batch.validate(model)?;
    let b = batch.batch_size();
    let k_len = batch.unroll_len();
    let a_count = model.action_count;
    let h_dim = model.hidden_dim;
    let inv_b = 1.0 / b as f64;

    if w.consistency != 0.0 {
        let t = targets.ok_or_else(|| TwinError::BadBatch("missing consistency targets".into()))?;
        if t.len() != k_len {
            return Err(TwinError::BadBatch("targets length != K".into()));
        }
    }

    let mut breakdown = LossBreakdown::default();

    // Forward through the unroll, retaining caches for the backward pass.
    let tf_cache = model.transform.forward_cached(&batch.obs)?;
    let mut latents: Vec<Array2<f64>> = vec![tf_cache.output().clone()];
    let mut predict_caches = Vec::with_capacity(k_len);
    let mut dyn_caches = Vec::with_capacity(k_len);
    let mut proj_caches = Vec::with_capacity(k_len);

    // Upstream gradients assembled during the forward sweep.
    let mut d_logits: Vec<Array2<f64>> = Vec::with_capacity(k_len);
    let mut d_value: Vec<Array1<f64>> = Vec::with_capacity(k_len);
    let mut d_reward: Vec<Array1<f64>> = Vec::with_capacity(k_len);
    let mut d_proj: Vec<Array2<f64>> = Vec::with_capacity(k_len);

    for k in 0..k_len {
        let h_k = latents[k].clone();

        // Prediction heads at the pre-action latent.
        let p_cache = model.predict.forward_cached(&h_k)?;
        {
            let out = p_cache.output();
            let mut dl = Array2::zeros((b, a_count));
            let mut dv = Array1::zeros(b);
            for row in 0..b {
                let m = batch.mask[(row, k)];
                if m == 0.0 {
                    continue;
                }
                let full = out.row(row);
                let full = full.as_slice().expect("standard layout");
                let logits = &full[..a_count];
                let v = full[a_count];

                let pi = batch.policies[k].row(row);
                let (kl, grad) = loss_kl(pi.as_slice().expect("standard layout"), logits)?;
                breakdown.policy += w.policy * kl * inv_b;
                for (j, g) in grad.into_iter().enumerate() {
                    dl[(row, j)] = w.policy * g * inv_b;
                }

                let (mse, dmse) = loss_mse(v, batch.values[(row, k)]);
                breakdown.value += w.value * mse * inv_b;
                dv[row] = w.value * dmse * inv_b;
            }
            d_logits.push(dl);
            d_value.push(dv);
        }
        predict_caches.push(p_cache);

        // Dynamics step under the one-hot action.
        let mut dyn_in = Array2::zeros((b, h_dim + a_count));
        dyn_in.slice_mut(ndarray::s![.., ..h_dim]).assign(&h_k);
        for row in 0..b {
            dyn_in[(row, h_dim + batch.actions[(row, k)])] = 1.0;
        }
        let d_cache = model.dynamic.forward_cached(&dyn_in)?;
        let raw = d_cache.output();
        let mut dr = Array1::zeros(b);
        for row in 0..b {
            let m = batch.mask[(row, k)];
            if m == 0.0 {
                continue;
            }
            let (mse, dmse) = loss_mse(raw[(row, 0)], batch.rewards[(row, k)]);
            breakdown.reward += w.reward * mse * inv_b;
            dr[row] = w.reward * dmse * inv_b;
        }
        d_reward.push(dr);
        let h_next = raw.slice(ndarray::s![.., 1..]).mapv(f64::tanh);
        dyn_caches.push(d_cache);

        // Consistency head on the dynamics-predicted latent.
        if w.consistency != 0.0 {
            let tgt = &targets.unwrap()[k];
            let c_cache = model.proj_online.forward_cached(&h_next)?;
            let mut dp = Array2::zeros((b, model.proj_dim));
            {
                let out = c_cache.output();
                for row in 0..b {
                    let m = batch.mask[(row, k)];
                    if m == 0.0 {
                        continue;
                    }
                    let logits = out.row(row);
                    let logits = logits.as_slice().expect("standard layout");
                    let t_row = tgt.row(row).to_vec();
                    let (ce, grad) = loss_cross_entropy(logits, &t_row)?;
                    breakdown.consistency += w.consistency * ce * inv_b;
                    for (j, g) in grad.into_iter().enumerate() {
                        dp[(row, j)] = w.consistency * g * inv_b;
                    }
                }
            }
            proj_caches.push(Some(c_cache));
            d_proj.push(dp);
        } else {
            proj_caches.push(None);
            d_proj.push(Array2::zeros((b, model.proj_dim)));
        }

        latents.push(h_next);
    }

    // Backward through the unroll.
    let mut grads = TwinGradients {
        transform: GradientTape::zeros_like(&model.transform),
        dynamic: GradientTape::zeros_like(&model.dynamic),
        predict: GradientTape::zeros_like(&model.predict),
        proj_target: GradientTape::zeros_like(&model.proj_target),
        proj_online: GradientTape::zeros_like(&model.proj_online),
    };

    // d(loss)/d(latents[k+1]), accumulated from deeper unroll steps.
    let mut dh_next: Array2<f64> = Array2::zeros((b, h_dim));
    for k in (0..k_len).rev() {
        if let Some(c_cache) = &proj_caches[k] {
            let (tape, dh) = model.proj_online.backward(c_cache, &d_proj[k])?;
            grads.proj_online.add(&tape);
            dh_next += &dh;
        }

        // All consumers of the dynamics output latents[k+1] are accumulated;
        // the stabilization scale applies once at this boundary.
        dh_next *= latent_grad_scale;
        let h_next = &latents[k + 1];
        let mut dyn_upstream = Array2::zeros((b, 1 + h_dim));
        for row in 0..b {
            dyn_upstream[(row, 0)] = d_reward[k][row];
            for j in 0..h_dim {
                let y = h_next[(row, j)];
                dyn_upstream[(row, 1 + j)] = dh_next[(row, j)] * (1.0 - y * y);
            }
        }
        let (dyn_tape, dyn_dx) = model.dynamic.backward(&dyn_caches[k], &dyn_upstream)?;
        grads.dynamic.add(&dyn_tape);

        let mut dh = dyn_dx.slice(ndarray::s![.., ..h_dim]).to_owned();

        let pred_upstream = concatenate(
            Axis(1),
            &[
                d_logits[k].view(),
                d_value[k].view().insert_axis(Axis(1)),
            ],
        )
        .expect("concat shapes");
        let (pred_tape, pred_dx) = model.predict.backward(&predict_caches[k], &pred_upstream)?;
        grads.predict.add(&pred_tape);
        dh += &pred_dx;

        dh_next = dh;
    }
    let (tf_tape, _) = model.transform.backward(&tf_cache, &dh_next)?;
    grads.transform.add(&tf_tape);

    // c * ||theta||^2 across every network, including the target projection.
    if l2_coeff != 0.0 {
        let mut l2 = 0.0;
        l2 += model.transform.l2_norm_sq();
        l2 += model.dynamic.l2_norm_sq();
        l2 += model.predict.l2_norm_sq();
        l2 += model.proj_target.l2_norm_sq();
        l2 += model.proj_online.l2_norm_sq();
        breakdown.l2 = l2_coeff * l2;
        grads.transform.add_l2(&model.transform, l2_coeff);
        grads.dynamic.add_l2(&model.dynamic, l2_coeff);
        grads.predict.add_l2(&model.predict, l2_coeff);
        grads.proj_target.add_l2(&model.proj_target, l2_coeff);
        grads.proj_online.add_l2(&model.proj_online, l2_coeff);
    }

    breakdown.total = breakdown.reward
        + breakdown.policy
        + breakdown.value
        + breakdown.consistency
        + breakdown.l2;
    Ok((breakdown, grads))
}

/// Mean L2 distance between unrolled latents and the latents of the real
/// next observations, over valid steps. This is the K-step latent
/// prediction error the consistency loss is meant to shrink.
pub fn latent_unroll_error(model: &TwinModel, batch: &UnrollBatch) -> Result<f64, TwinError> {
    batch.validate(model)?;
    let b = batch.batch_size();
    let k_len = batch.unroll_len();
    let mut h = model.represent_batch(&batch.obs)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..k_len {
        let mut dyn_in = Array2::zeros((b, model.hidden_dim + model.action_count));
        dyn_in
            .slice_mut(ndarray::s![.., ..model.hidden_dim])
            .assign(&h);
        for row in 0..b {
            dyn_in[(row, model.hidden_dim + batch.actions[(row, k)])] = 1.0;
        }
        let raw = model.dynamic.forward(&dyn_in)?;
        let h_next = raw.slice(ndarray::s![.., 1..]).mapv(f64::tanh);
        let h_true = model.represent_batch(&batch.next_obs[k])?;
        for row in 0..b {
            if batch.mask[(row, k)] == 1.0 {
                let diff = &h_next.row(row) - &h_true.row(row);
                total += diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                count += 1;
            }
        }
        h = h_next;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

// ---------------------------------------------------------------------------
// Checkpoint bundle: magic, version, dimension header, loss weights, config
// hash, then the five networks in fixed order. Bit-exact round trip.

const CHECKPOINT_MAGIC: &[u8; 4] = b"GCDT";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<W: Write>(
    w: &mut W,
    model: &TwinModel,
    weights: &LossWeights,
) -> Result<(), TwinError> {
    w.write_all(CHECKPOINT_MAGIC).map_err(NnError::from)?;
    let mut emit_u32 = |v: u32| -> Result<(), TwinError> {
        w.write_all(&v.to_le_bytes()).map_err(NnError::from)?;
        Ok(())
    };
    emit_u32(CHECKPOINT_VERSION)?;
    emit_u32(model.obs_dim as u32)?;
    emit_u32(model.action_count as u32)?;
    emit_u32(model.hidden_dim as u32)?;
    emit_u32(model.proj_dim as u32)?;
    w.write_all(&model.config_hash().to_le_bytes())
        .map_err(NnError::from)?;
    for v in [weights.reward, weights.policy, weights.value, weights.consistency] {
        w.write_all(&v.to_le_bytes()).map_err(NnError::from)?;
    }
    for net in [
        &model.transform,
        &model.dynamic,
        &model.predict,
        &model.proj_target,
        &model.proj_online,
    ] {
        write_net(w, net)?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<(TwinModel, LossWeights), TwinError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(NnError::from)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Corrupt("bad magic".into()).into());
    }
    let read_u32 = |r: &mut R| -> Result<u32, TwinError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(NnError::from)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Corrupt(format!("version {version}")).into());
    }
    let obs_dim = read_u32(r)? as usize;
    let action_count = read_u32(r)? as usize;
    let hidden_dim = read_u32(r)? as usize;
    let proj_dim = read_u32(r)? as usize;
    let mut h = [0u8; 8];
    r.read_exact(&mut h).map_err(NnError::from)?;
    let stored_hash = u64::from_le_bytes(h);
    let mut weights = [0f64; 4];
    for v in &mut weights {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(NnError::from)?;
        *v = f64::from_le_bytes(b);
    }
    let transform = read_net(r)?;
    let dynamic = read_net(r)?;
    let predict = read_net(r)?;
    let proj_target = read_net(r)?;
    let proj_online = read_net(r)?;

    let model = TwinModel {
        transform,
        dynamic,
        predict,
        proj_target,
        proj_online,
        obs_dim,
        action_count,
        hidden_dim,
        proj_dim,
    };
    if model.config_hash() != stored_hash {
        return Err(NnError::Corrupt("config hash mismatch".into()).into());
    }
    if model.transform.in_dim() != obs_dim
        || model.transform.out_dim() != hidden_dim
        || model.dynamic.in_dim() != hidden_dim + action_count
        || model.dynamic.out_dim() != 1 + hidden_dim
        || model.predict.out_dim() != action_count + 1
        || model.proj_online.out_dim() != proj_dim
    {
        return Err(NnError::Corrupt("network shapes disagree with header".into()).into());
    }
    Ok((
        model,
        LossWeights {
            reward: weights[0],
            policy: weights[1],
            value: weights[2],
            consistency: weights[3],
        },
    ))
}
