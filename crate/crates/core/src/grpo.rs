//! Stage 1: group-relative policy optimization of the inference policy.
//!
//! For each user in a minibatch, `G` summaries are sampled from `π_φ(·|c)`.
//! Each summary is rewarded with minus the summary-augmented loss averaged over
//! the user's pairs, evaluated with the frozen reference generator. Rewards are
//! centred (and optionally standardised) within the group, and `π_φ` takes one
//! clipped policy-gradient ascent step with a per-token KL anchor to `π_φref`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PopiError, Result};
use crate::objectives::{margin_with_reference, reference_log_probs, ObjectiveConfig};
use crate::optim::{l2_norm, warmup_cosine, Optimizer, OptimizerKind};
use crate::policy::{Policy, SequenceModel, TokenSeq};
use crate::scalar::Scalar;
use crate::seed;
use crate::synthworld::UserRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip_eps: f64,
    /// Weight of the KL anchor (the objective's `α`).
    pub kl_weight: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub warmup: usize,
    pub normalize_advantages: bool,
    pub optimizer: OptimizerKind,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            steps: 300,
            lr: 1e-6,
            clip_eps: 0.2,
            kl_weight: 0.0002,
            seed: 0,
            batch_size: 8,
            warmup: 150,
            normalize_advantages: true,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(invalid("group_size must be >= 2"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid("lr must be positive"));
        }
        if !(self.clip_eps >= 0.0) {
            return Err(invalid("clip_eps must be >= 0"));
        }
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return Err(invalid("kl_weight must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRollout<T> {
    pub user_index: usize,
    /// Inference context `c ⊕ SEP`.
    pub context: TokenSeq,
    pub summaries: Vec<TokenSeq>,
    pub rewards: Vec<T>,
    pub advantages: Vec<T>,
    pub old_log_probs: Vec<T>,
}

/// One line of a training history file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub mean_summary_len: f64,
    pub grad_norm: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics<T> {
    pub grad_norm: T,
    pub update_norm: T,
    pub mean_reward: T,
    pub mean_kl: T,
    pub mean_summary_len: f64,
}

/// Mean-centred rewards, divided by `std + 1e-8` when `normalize`. A group
/// with no spread returns zeros.
pub fn compute_advantages<T: Scalar>(rewards: &[T], normalize: bool) -> Result<Vec<T>> {
    if rewards.len() < 2 {
        return Err(invalid("a group needs at least two rewards"));
    }
    let lo = rewards.iter().cloned().fold(T::infinity(), T::min);
    let hi = rewards.iter().cloned().fold(T::neg_infinity(), T::max);
    if lo == hi {
        return Ok(vec![T::zero(); rewards.len()]);
    }
    let n = T::lit(rewards.len() as f64);
    let mean = rewards.iter().cloned().sum::<T>() / n;
    let centred: Vec<T> = rewards.iter().map(|&r| r - mean).collect();
    if !normalize {
        return Ok(centred);
    }
    let std = (centred.iter().map(|&a| a * a).sum::<T>() / n).sqrt();
    let denom = std + T::lit(1e-8);
    Ok(centred.into_iter().map(|a| a / denom).collect())
}

/// `-mean_j ℓ_SA(pair_j, z)` with `gen` conditioned on `z`.
pub fn summary_reward<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    gen: &G,
    gen_ref: &R,
    user: &UserRecord,
    summary: &TokenSeq,
    cfg_obj: &ObjectiveConfig<T>,
) -> Result<T> {
    if user.pairs.is_empty() {
        return Err(invalid(format!("user {} has no preference pairs", user.id)));
    }
    let mut total = T::zero();
    for pair in &user.pairs {
        let delta = margin_with_reference(gen, pair, summary, reference_log_probs(gen_ref, pair)?)?;
        total += cfg_obj.loss_from_margin(delta);
    }
    let r = -total / T::lit(user.pairs.len() as f64);
    if !r.is_finite() {
        return Err(PopiError::Numeric("non-finite reward".into()));
    }
    Ok(r)
}

/// Samples a group of summaries for one user and scores them with the frozen
/// reference generator.
pub fn rollout_group<T: Scalar>(
    inf: &Policy<T>,
    gen_ref: &Policy<T>,
    user: &UserRecord,
    user_index: usize,
    cfg_obj: &ObjectiveConfig<T>,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<GroupRollout<T>> {
    rollout_group_with(inf, gen_ref, gen_ref, user, user_index, cfg_obj, cfg, seed)
}

/// [`rollout_group`] with an explicit generator in place of `gen_ref`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group_with<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    inf: &Policy<T>,
    gen: &G,
    gen_ref: &R,
    user: &UserRecord,
    user_index: usize,
    cfg_obj: &ObjectiveConfig<T>,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<GroupRollout<T>> {
    if user.pairs.is_empty() {
        return Err(invalid(format!("user {} has no preference pairs", user.id)));
    }
    let context = TokenSeq::compose(&user.signals, &TokenSeq::empty());
    let max_len = inf.arch().max_len;
    let references = user.pairs.iter().map(|p| reference_log_probs(gen_ref, p)).collect::<Result<Vec<_>>>()?;
    let mut summaries = Vec::with_capacity(cfg.group_size);
    let mut rewards = Vec::with_capacity(cfg.group_size);
    let mut old_log_probs = Vec::with_capacity(cfg.group_size);
    for g in 0..cfg.group_size {
        let z = inf.sample(&context, seed::derive(seed, &[g as u64]), max_len)?;
        let mut total = T::zero();
        for (pair, &r) in user.pairs.iter().zip(&references) {
            total += cfg_obj.loss_from_margin(margin_with_reference(gen, pair, &z, r)?);
        }
        let reward = -total / T::lit(user.pairs.len() as f64);
        if !reward.is_finite() {
            return Err(PopiError::Numeric("non-finite reward".into()));
        }
        old_log_probs.push(inf.log_prob(&context, &z)?);
        rewards.push(reward);
        summaries.push(z);
    }
    let advantages = compute_advantages(&rewards, cfg.normalize_advantages)?;
    Ok(GroupRollout { user_index, context, summaries, rewards, advantages, old_log_probs })
}

/// Gradient of the *negated* clipped surrogate minus the KL penalty, i.e. a
/// descent direction. Returns `(grad, mean_reward, mean_kl, mean_len)`.
pub fn surrogate_gradient<T: Scalar>(
    inf: &Policy<T>,
    inf_ref: &Policy<T>,
    rollouts: &[GroupRollout<T>],
    cfg: &GrpoConfig,
) -> Result<(Vec<T>, T, T, f64)> {
    if inf.is_frozen() {
        return Err(PopiError::FrozenPolicy);
    }
    let n: usize = rollouts.iter().map(|r| r.summaries.len()).sum();
    if n == 0 {
        return Err(invalid("no rollouts"));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let eps = T::lit(cfg.clip_eps);
    let kl_w = T::lit(cfg.kl_weight);
    let mut grad = vec![T::zero(); inf.num_params()];
    let (mut reward_sum, mut kl_sum, mut len_sum) = (T::zero(), T::zero(), 0usize);
    for ro in rollouts {
        for g in 0..ro.summaries.len() {
            let z = &ro.summaries[g];
            let a = ro.advantages[g];
            let lp = inf.log_prob(&ro.context, z)?;
            let ratio = (lp - ro.old_log_probs[g]).exp();
            let clipped = (a > T::zero() && ratio > T::one() + eps) || (a < T::zero() && ratio < T::one() - eps);
            if !clipped && a != T::zero() {
                inf.accumulate_grad_log_prob(&ro.context, z, -(a * ratio * inv_n), &mut grad)?;
            }
            kl_sum += if cfg.kl_weight > 0.0 {
                inf.accumulate_grad_token_kl(inf_ref, &ro.context, z, kl_w * inv_n, &mut grad)?
            } else {
                inf.token_kl(inf_ref, &ro.context, z)?
            };
            reward_sum += ro.rewards[g];
            len_sum += z.len();
        }
    }
    Ok((grad, reward_sum * inv_n, kl_sum * inv_n, len_sum as f64 / n as f64))
}

/// One on-policy ascent step on the clipped surrogate minus `kl_weight · KL`.
pub fn grpo_step<T: Scalar>(
    inf: &mut Policy<T>,
    inf_ref: &Policy<T>,
    rollouts: &[GroupRollout<T>],
    cfg: &GrpoConfig,
    optimizer: &mut Optimizer<T>,
    lr: f64,
) -> Result<StepMetrics<T>> {
    let (grad, mean_reward, mean_kl, mean_summary_len) = surrogate_gradient(inf, inf_ref, rollouts, cfg)?;
    let grad_norm = l2_norm(&grad);
    let update_norm = optimizer.step(inf, &grad, lr)?;
    Ok(StepMetrics { grad_norm, update_norm, mean_reward, mean_kl, mean_summary_len })
}

/// Users drawn for `step`: a seeded shuffle truncated to `batch_size`.
pub fn minibatch(num_users: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..num_users).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed, &[step as u64, 0x6D62])));
    idx.truncate(batch_size.min(num_users));
    idx
}

/// Runs `cfg.steps` GRPO steps from `inf`. `gen_ref` must be frozen.
pub fn train_stage1<T: Scalar>(
    inf: &Policy<T>,
    inf_ref: &Policy<T>,
    gen_ref: &Policy<T>,
    users: &[UserRecord],
    cfg_obj: &ObjectiveConfig<T>,
    cfg: &GrpoConfig,
) -> Result<(Policy<T>, Vec<HistoryRecord>)> {
    cfg.validate()?;
    if !gen_ref.is_frozen() {
        return Err(invalid("stage 1 requires a frozen generation reference"));
    }
    if users.is_empty() {
        return Err(invalid("empty user list"));
    }
    let mut policy = inf.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, policy.num_params());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = minibatch(users.len(), cfg.batch_size, cfg.seed, step);
        let rollouts = batch
            .iter()
            .map(|&i| rollout_group(&policy, gen_ref, &users[i], i, cfg_obj, cfg, seed::derive(cfg.seed, &[step as u64, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let lr = warmup_cosine(cfg.lr, step, cfg.warmup, cfg.steps);
        let m = grpo_step(&mut policy, inf_ref, &rollouts, cfg, &mut optimizer, lr)?;
        history.push(HistoryRecord {
            step,
            mean_reward: m.mean_reward.as_f64(),
            mean_kl: m.mean_kl.as_f64(),
            mean_summary_len: m.mean_summary_len,
            grad_norm: m.grad_norm.as_f64(),
            loss: -m.mean_reward.as_f64(),
        });
    }
    Ok((policy, history))
}
