//! Preference-alignment losses.
//!
//! For a pair `(x, y_c, y_r)` and a summary `z`, the log-ratio margin is
//!
//! ```text
//! Δ = [log π_θ(y_c | z ⊕ SEP ⊕ x) - log π_ref(y_c | SEP ⊕ x)]
//!   - [log π_θ(y_r | z ⊕ SEP ⊕ x) - log π_ref(y_r | SEP ⊕ x)]
//! ```
//!
//! The reference never sees the summary. DPO scores `-log σ(βΔ)`; IPO scores
//! `(Δ - 1/(2β))²`. The batch objective averages over users, their pairs and
//! sampled summaries; the unified objective adds `α · KL(π_φ(·|c) ‖ π_φref(·|c))`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, PopiError, Result};
use crate::pipeline::Conditioning;
use crate::policy::{support_size, Policy, SequenceModel, TokenSeq};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::seed;
use crate::synthworld::UserRecord;

/// Ratio between the KL weight and the DPO temperature.
pub const ALPHA_PER_BETA: f64 = 0.002;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

impl PreferencePair {
    pub fn new(prompt: TokenSeq, chosen: TokenSeq, rejected: TokenSeq) -> Result<Self> {
        if chosen == rejected {
            return Err(invalid("chosen and rejected responses must differ"));
        }
        Ok(Self { prompt, chosen, rejected })
    }

    pub fn swapped(&self) -> Self {
        Self { prompt: self.prompt.clone(), chosen: self.rejected.clone(), rejected: self.chosen.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dpo,
    Ipo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig<T> {
    pub beta: T,
    pub alpha: T,
    pub variant: Variant,
}

impl<T: Scalar> ObjectiveConfig<T> {
    /// DPO with the coupled KL weight `α = 0.002 β`.
    pub fn dpo(beta: T) -> Result<Self> {
        Self::check_beta(beta)?;
        Ok(Self { beta, alpha: T::lit(ALPHA_PER_BETA) * beta, variant: Variant::Dpo })
    }

    /// IPO with the coupled KL weight `α = 0.002 · 2/β`.
    pub fn ipo(beta: T) -> Result<Self> {
        Self::check_beta(beta)?;
        Ok(Self { beta, alpha: T::lit(ALPHA_PER_BETA) * T::lit(2.0) / beta, variant: Variant::Ipo })
    }

    pub fn new(variant: Variant, beta: T) -> Result<Self> {
        match variant {
            Variant::Dpo => Self::dpo(beta),
            Variant::Ipo => Self::ipo(beta),
        }
    }

    pub fn with_alpha(self, alpha: T) -> Result<Self> {
        if !(alpha >= T::zero()) || !alpha.is_finite() {
            return Err(invalid("alpha must be finite and >= 0"));
        }
        Ok(Self { alpha, ..self })
    }

    fn check_beta(beta: T) -> Result<()> {
        if !(beta > T::zero()) || !beta.is_finite() {
            return Err(invalid("beta must be finite and > 0"));
        }
        Ok(())
    }

    /// Loss as a function of the log-ratio margin.
    pub fn loss_from_margin(&self, delta: T) -> T {
        match self.variant {
            Variant::Dpo => softplus(-self.beta * delta),
            Variant::Ipo => {
                let r = delta - T::one() / (T::lit(2.0) * self.beta);
                r * r
            }
        }
    }

    /// `d loss / d Δ`.
    pub fn dloss_dmargin(&self, delta: T) -> T {
        match self.variant {
            Variant::Dpo => -self.beta * sigmoid(-self.beta * delta),
            Variant::Ipo => T::lit(2.0) * (delta - T::one() / (T::lit(2.0) * self.beta)),
        }
    }
}

fn finite<T: Scalar>(x: T, what: &str) -> Result<T> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(PopiError::Numeric(format!("non-finite {what}")))
    }
}

/// Reference log-probabilities `(log π_ref(y_c|x), log π_ref(y_r|x))`.
pub fn reference_log_probs<T: Scalar, R: SequenceModel<T> + ?Sized>(gen_ref: &R, pair: &PreferencePair) -> Result<(T, T)> {
    let ctx = TokenSeq::compose(&TokenSeq::empty(), &pair.prompt);
    Ok((gen_ref.log_prob(&ctx, &pair.chosen)?, gen_ref.log_prob(&ctx, &pair.rejected)?))
}

/// Log-ratio margin `Δ` given precomputed reference log-probabilities.
pub fn margin_with_reference<T: Scalar, G: SequenceModel<T> + ?Sized>(
    gen: &G,
    pair: &PreferencePair,
    summary: &TokenSeq,
    reference: (T, T),
) -> Result<T> {
    let ctx = TokenSeq::compose(summary, &pair.prompt);
    let c = gen.log_prob(&ctx, &pair.chosen)?;
    let r = gen.log_prob(&ctx, &pair.rejected)?;
    finite((c - reference.0) - (r - reference.1), "log-ratio margin")
}

pub fn log_ratio_margin<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    gen: &G,
    gen_ref: &R,
    pair: &PreferencePair,
    summary: &TokenSeq,
) -> Result<T> {
    margin_with_reference(gen, pair, summary, reference_log_probs(gen_ref, pair)?)
}

/// Per-user DPO against a dedicated model: no summary, prompt-only context.
pub fn dpo_dedicated_loss<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    policy: &G,
    reference: &R,
    pair: &PreferencePair,
    cfg: &ObjectiveConfig<T>,
) -> Result<T> {
    if cfg.variant != Variant::Dpo {
        return Err(invalid("dpo_dedicated_loss requires the DPO variant"));
    }
    let delta = log_ratio_margin(policy, reference, pair, &TokenSeq::empty())?;
    finite(cfg.loss_from_margin(delta), "DPO loss")
}

/// Summary-augmented loss for one pair and one summary.
pub fn sa_loss_pointwise<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    gen: &G,
    gen_ref: &R,
    pair: &PreferencePair,
    summary: &TokenSeq,
    cfg: &ObjectiveConfig<T>,
) -> Result<T> {
    let delta = log_ratio_margin(gen, gen_ref, pair, summary)?;
    finite(cfg.loss_from_margin(delta), "summary-augmented loss")
}

/// Seed for the summary paired with `(user, pair, sample)`.
pub fn summary_seed(seed: u64, user: usize, pair: usize, sample: usize) -> u64 {
    seed::derive(seed, &[user as u64, pair as u64, sample as u64])
}

/// Shared forward (and optionally backward) pass of the batch objective over
/// the users selected by `indices`, averaged as `1/|indices| Σ_i 1/|D_i| Σ_pairs 1/S Σ_s`.
/// Returns the loss and the mean summary length used.
pub(crate) fn batch_loss<T: Scalar, R: SequenceModel<T> + ?Sized>(
    gen: &Policy<T>,
    gen_ref: &R,
    conditioning: &Conditioning<'_, T>,
    users: &[UserRecord],
    indices: &[usize],
    cfg: &ObjectiveConfig<T>,
    samples: usize,
    seed: u64,
    mut grad: Option<&mut [T]>,
) -> Result<(T, f64)> {
    if indices.is_empty() {
        return Err(invalid("empty user list"));
    }
    if samples == 0 {
        return Err(invalid("samples per pair must be >= 1"));
    }
    let mut total = T::zero();
    let mut len_sum = 0usize;
    let mut len_count = 0usize;
    let n_users = T::lit(indices.len() as f64);
    for &i in indices {
        let user = &users[i];
        if user.pairs.is_empty() {
            return Err(invalid(format!("user {i} has no preference pairs")));
        }
        let w_user = T::one() / (n_users * T::lit(user.pairs.len() as f64) * T::lit(samples as f64));
        for (j, pair) in user.pairs.iter().enumerate() {
            let reference = reference_log_probs(gen_ref, pair)?;
            for s in 0..samples {
                let z = conditioning.prefix(user, summary_seed(seed, i, j, s))?;
                len_sum += z.len();
                len_count += 1;
                let delta = margin_with_reference(gen, pair, &z, reference)?;
                total += w_user * finite(cfg.loss_from_margin(delta), "summary-augmented loss")?;
                if let Some(g) = grad.as_deref_mut() {
                    let coeff = w_user * cfg.dloss_dmargin(delta);
                    let ctx = TokenSeq::compose(&z, &pair.prompt);
                    gen.accumulate_grad_log_prob(&ctx, &pair.chosen, coeff, g)?;
                    gen.accumulate_grad_log_prob(&ctx, &pair.rejected, -coeff, g)?;
                }
            }
        }
    }
    Ok((total, len_sum as f64 / len_count.max(1) as f64))
}

fn forward_only<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    gen: &G,
    gen_ref: &R,
    conditioning: &Conditioning<'_, T>,
    users: &[UserRecord],
    cfg: &ObjectiveConfig<T>,
    samples: usize,
    seed: u64,
) -> Result<T> {
    if users.is_empty() {
        return Err(invalid("empty user list"));
    }
    if samples == 0 {
        return Err(invalid("samples per pair must be >= 1"));
    }
    let mut total = T::zero();
    let n_users = T::lit(users.len() as f64);
    for (i, user) in users.iter().enumerate() {
        if user.pairs.is_empty() {
            return Err(invalid(format!("user {i} has no preference pairs")));
        }
        let w = T::one() / (n_users * T::lit(user.pairs.len() as f64) * T::lit(samples as f64));
        for (j, pair) in user.pairs.iter().enumerate() {
            let reference = reference_log_probs(gen_ref, pair)?;
            for s in 0..samples {
                let z = conditioning.prefix(user, summary_seed(seed, i, j, s))?;
                let delta = margin_with_reference(gen, pair, &z, reference)?;
                total += w * finite(cfg.loss_from_margin(delta), "summary-augmented loss")?;
            }
        }
    }
    Ok(total)
}

/// Monte-Carlo estimate of the batch objective with `samples` summaries per
/// (user, pair). Deterministic in `seed`.
pub fn sa_loss_batch<T: Scalar, G, R, I>(
    gen: &G,
    gen_ref: &R,
    inf: &I,
    users: &[UserRecord],
    cfg: &ObjectiveConfig<T>,
    samples: usize,
    seed: u64,
) -> Result<T>
where
    G: SequenceModel<T> + ?Sized,
    R: SequenceModel<T> + ?Sized,
    I: SequenceModel<T>,
{
    forward_only(gen, gen_ref, &Conditioning::Summaries(inf), users, cfg, samples, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `Σ p log(p/q)` over the enumerated summary space.
    ExactEnumeration,
    /// Per-token analytic KL summed along sampled summaries.
    PerTokenMonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnifiedLoss<T> {
    pub total: T,
    pub sa_loss: T,
    pub kl: T,
    pub alpha: T,
    pub kl_estimator: KlEstimator,
}

/// Mean over users of `KL(π_φ(·|c_i) ‖ π_φref(·|c_i))`.
pub fn mean_summary_kl<T: Scalar>(
    inf: &Policy<T>,
    inf_ref: &Policy<T>,
    users: &[UserRecord],
    samples: usize,
    seed: u64,
    cap: usize,
) -> Result<(T, KlEstimator)> {
    if users.is_empty() {
        return Err(invalid("empty user list"));
    }
    let max_len = inf.arch().max_len;
    let exact = support_size(inf.vocab(), max_len) <= cap as u128;
    let mut total = T::zero();
    for (i, u) in users.iter().enumerate() {
        let ctx = TokenSeq::compose(&u.signals, &TokenSeq::empty());
        if exact {
            let p = inf.enumerate_distribution(&ctx, max_len, cap)?;
            let q = inf_ref.enumerate_distribution(&ctx, max_len, cap)?;
            total += p.kl(&q)?;
        } else {
            let n = samples.max(1);
            let mut acc = T::zero();
            for s in 0..n {
                let z = inf.sample(&ctx, seed::derive(seed, &[i as u64, s as u64, 0x4B4C]), max_len)?;
                acc += inf.token_kl(inf_ref, &ctx, &z)?;
            }
            total += acc / T::lit(n as f64);
        }
    }
    let kl = total / T::lit(users.len() as f64);
    let estimator = if exact { KlEstimator::ExactEnumeration } else { KlEstimator::PerTokenMonteCarlo };
    Ok((finite(kl, "KL")?, estimator))
}

/// `L_SA + α · KL`, with the estimator used for the KL term reported alongside.
#[allow(clippy::too_many_arguments)]
pub fn unified_loss<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    inf: &Policy<T>,
    inf_ref: &Policy<T>,
    gen: &G,
    gen_ref: &R,
    users: &[UserRecord],
    cfg: &ObjectiveConfig<T>,
    samples: usize,
    seed: u64,
    cap: usize,
) -> Result<UnifiedLoss<T>> {
    if !(cfg.alpha >= T::zero()) {
        return Err(invalid("alpha must be >= 0"));
    }
    let sa = sa_loss_batch(gen, gen_ref, inf, users, cfg, samples, seed)?;
    if cfg.alpha == T::zero() {
        return Ok(UnifiedLoss { total: sa, sa_loss: sa, kl: T::zero(), alpha: cfg.alpha, kl_estimator: KlEstimator::ExactEnumeration });
    }
    let (kl, est) = mean_summary_kl(inf, inf_ref, users, samples, seed, cap)?;
    Ok(UnifiedLoss { total: sa + cfg.alpha * kl, sa_loss: sa, kl, alpha: cfg.alpha, kl_estimator: est })
}

/// Gradient of the unified objective with respect to the generator. The KL
/// term does not involve the generator, so this is the gradient of
/// [`sa_loss_batch`] with the same summaries (same `seed`).
#[allow(clippy::too_many_arguments)]
pub fn grad_unified_wrt_gen<T: Scalar, R: SequenceModel<T> + ?Sized>(
    gen: &Policy<T>,
    gen_ref: &R,
    inf: &Policy<T>,
    users: &[UserRecord],
    cfg: &ObjectiveConfig<T>,
    samples: usize,
    seed: u64,
) -> Result<Vec<T>> {
    if gen.is_frozen() {
        return Err(PopiError::FrozenPolicy);
    }
    let mut g = vec![T::zero(); gen.num_params()];
    let idx: Vec<usize> = (0..users.len()).collect();
    batch_loss(gen, gen_ref, &Conditioning::summaries(inf), users, &idx, cfg, samples, seed, Some(&mut g))?;
    Ok(g)
}

#[cfg(test)]
mod tests;
