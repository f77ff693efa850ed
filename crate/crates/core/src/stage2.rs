//! Stage 2: fine-tune the generator on the summary-augmented objective with the
//! inference policy frozen. Summaries are resampled every step.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, PopiError, Result};
use crate::grpo::{minibatch, HistoryRecord};
use crate::objectives::{batch_loss, ObjectiveConfig};
use crate::optim::{l2_norm, warmup_cosine, Optimizer, OptimizerKind};
use crate::pipeline::Conditioning;
use crate::policy::{Policy, SequenceModel};
use crate::scalar::Scalar;
use crate::seed;
use crate::synthworld::UserRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Summaries drawn per (user, pair) each step.
    pub samples_per_pair: usize,
    pub warmup: usize,
    pub optimizer: OptimizerKind,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self { steps: 300, lr: 0.01, seed: 0, batch_size: 8, samples_per_pair: 1, warmup: 20, optimizer: OptimizerKind::Adam }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid("lr must be positive"));
        }
        if self.batch_size == 0 || self.samples_per_pair == 0 {
            return Err(invalid("batch_size and samples_per_pair must be positive"));
        }
        Ok(())
    }
}

/// Minimises the batch objective over `gen` with summaries from the frozen
/// `inf_frozen`. `gen` is normally a fresh copy of `gen_ref`.
pub fn train_stage2<T: Scalar>(
    gen: &Policy<T>,
    gen_ref: &Policy<T>,
    inf_frozen: &Policy<T>,
    users: &[UserRecord],
    cfg_obj: &ObjectiveConfig<T>,
    cfg: &Stage2Config,
) -> Result<(Policy<T>, Vec<HistoryRecord>)> {
    if !inf_frozen.is_frozen() {
        return Err(invalid("stage 2 requires a frozen inference policy"));
    }
    train_stage2_with(gen, gen_ref, Conditioning::summaries(inf_frozen), users, cfg_obj, cfg)
}

/// Stage 2 with an arbitrary conditioning: raw signals, summaries from any
/// model, or nothing.
pub fn train_stage2_with<T: Scalar, R: SequenceModel<T> + ?Sized>(
    gen: &Policy<T>,
    gen_ref: &R,
    conditioning: Conditioning<'_, T>,
    users: &[UserRecord],
    cfg_obj: &ObjectiveConfig<T>,
    cfg: &Stage2Config,
) -> Result<(Policy<T>, Vec<HistoryRecord>)> {
    cfg.validate()?;
    if gen.is_frozen() {
        return Err(PopiError::FrozenPolicy);
    }
    if users.is_empty() {
        return Err(invalid("empty user list"));
    }
    let mut policy = gen.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, policy.num_params());
    let mut history = Vec::with_capacity(cfg.steps);
    let mut grad = vec![T::zero(); policy.num_params()];
    for step in 0..cfg.steps {
        let batch = minibatch(users.len(), cfg.batch_size, cfg.seed, step);
        grad.iter_mut().for_each(|g| *g = T::zero());
        let step_seed = seed::derive(cfg.seed, &[step as u64, 0x7332]);
        let (loss, mean_len) =
            batch_loss(&policy, gen_ref, &conditioning, users, &batch, cfg_obj, cfg.samples_per_pair, step_seed, Some(&mut grad))?;
        let grad_norm = l2_norm(&grad);
        optimizer.step(&mut policy, &grad, warmup_cosine(cfg.lr, step, cfg.warmup, cfg.steps))?;
        history.push(HistoryRecord {
            step,
            mean_reward: -loss.as_f64(),
            mean_kl: 0.0,
            mean_summary_len: mean_len,
            grad_norm: grad_norm.as_f64(),
            loss: loss.as_f64(),
        });
    }
    Ok((policy, history))
}
