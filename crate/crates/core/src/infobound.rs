//! Exact information accounting for the summary-augmented DPO loss.
//!
//! Users `u` are uniform over a slice, items `q = (x, a, b)` are uniform over a
//! shared set, summaries follow the channel `π(z | c_u)` and the label
//! `ℓ = [a ≻ b]` follows the world's Bradley–Terry process `P(ℓ | u, q)`. The
//! generator induces the label model `P_θ(ℓ | q, z) = σ(β Δ(q, z))`. With
//! everything enumerable,
//!
//! ```text
//! L_SA = E_{u,q,z} CE(P(·|u,q), P_θ(·|q,z))
//!      = E_{q,z} KL(P(·|q,z) ‖ P_θ(·|q,z)) + H(ℓ | Q) - I(ℓ ; Z | Q)
//! ```
//!
//! where `P(ℓ | q, z)` is the posterior mixture over users. Since the KL term
//! is non-negative, `L_SA ≥ H(ℓ|Q) - I(ℓ;Z|Q)`, with the gap equal to the KL.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, PopiError, Result};
use crate::objectives::{log_ratio_margin, PreferencePair};
use crate::policy::{support_size, Policy, SequenceModel, TokenSeq};
use crate::scalar::{log_sigmoid, Scalar};
use crate::synthworld::{bt_preference, TokenLayout, UserRecord};

/// Tolerances used by [`InfoReport::check`].
pub const IDENTITY_TOL: f64 = 1e-8;
pub const GAP_TOL: f64 = 1e-8;
pub const NONNEG_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub l_sa: f64,
    pub kl_term: f64,
    /// `H(ℓ | Q)`.
    pub entropy_h: f64,
    /// `I(ℓ ; Z | Q)`.
    pub mutual_info_i: f64,
    /// `l_sa - (entropy_h - mutual_info_i)`.
    pub bound_gap: f64,
    /// The constant of the bound, pinned to `entropy_h`.
    pub constant_c: f64,
}

impl InfoReport {
    fn from_parts(l_sa: f64, kl_term: f64, entropy_h: f64, mutual_info_i: f64) -> Self {
        Self { l_sa, kl_term, entropy_h, mutual_info_i, bound_gap: l_sa - (entropy_h - mutual_info_i), constant_c: entropy_h }
    }

    /// Re-derives the gap after adding `offset` to the loss. Used to probe the checker.
    pub fn with_loss_offset(&self, offset: f64) -> Self {
        Self::from_parts(self.l_sa + offset, self.kl_term, self.entropy_h, self.mutual_info_i)
    }

    /// Decomposition residual `l_sa - (kl + H - I)`.
    pub fn identity_residual(&self) -> f64 {
        self.l_sa - (self.kl_term + self.entropy_h - self.mutual_info_i)
    }

    /// Every invariant: finiteness, non-negativity, the decomposition and the bound.
    pub fn check(&self) -> Result<()> {
        let fields = [self.l_sa, self.kl_term, self.entropy_h, self.mutual_info_i, self.bound_gap, self.constant_c];
        if fields.iter().any(|x| !x.is_finite()) {
            return Err(PopiError::Invariant("non-finite report field".into()));
        }
        if self.kl_term < -NONNEG_TOL {
            return Err(PopiError::Invariant(format!("negative KL term {}", self.kl_term)));
        }
        if self.mutual_info_i < -NONNEG_TOL {
            return Err(PopiError::Invariant(format!("negative mutual information {}", self.mutual_info_i)));
        }
        if self.identity_residual().abs() > IDENTITY_TOL {
            return Err(PopiError::Invariant(format!("decomposition residual {}", self.identity_residual())));
        }
        if self.bound_gap < -GAP_TOL {
            return Err(PopiError::Invariant(format!("bound violated: gap {}", self.bound_gap)));
        }
        if (self.bound_gap - self.kl_term).abs() > IDENTITY_TOL {
            return Err(PopiError::Invariant(format!("gap {} differs from KL term {}", self.bound_gap, self.kl_term)));
        }
        Ok(())
    }

    /// `key = value` lines.
    pub fn to_record(&self) -> String {
        format!(
            "l_sa = {:.12}\nkl_term = {:.12}\nentropy_h = {:.12}\nmutual_info_i = {:.12}\nbound_gap = {:.12}\nconstant_c = {:.12}\n",
            self.l_sa, self.kl_term, self.entropy_h, self.mutual_info_i, self.bound_gap, self.constant_c
        )
    }
}

/// `Z(x, z) = Σ_y π_ref(y|x) · π_θ(y|z,x) / π_ref(y|x)`, summed over the
/// enumerated response space.
pub fn partition<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    gen: &G,
    gen_ref: &R,
    prompt: &TokenSeq,
    summary: &TokenSeq,
    cap: usize,
) -> Result<f64> {
    let max_len = gen.max_len().max(gen_ref.max_len());
    let refd = gen_ref.enumerate(&TokenSeq::compose(&TokenSeq::empty(), prompt), max_len, cap)?;
    let ctx = TokenSeq::compose(summary, prompt);
    let mut z = 0.0;
    for (y, lq) in refd.support.iter().zip(&refd.log_probs) {
        let lq = lq.as_f64();
        let lp = gen.log_prob(&ctx, y)?.as_f64();
        z += lq.exp() * (lp - lq).exp();
    }
    Ok(z)
}

/// `β log(π_θ(y|z,x) / π_ref(y|x)) + β log Z(x, z)`.
pub fn implicit_reward<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    gen: &G,
    gen_ref: &R,
    prompt: &TokenSeq,
    response: &TokenSeq,
    summary: &TokenSeq,
    beta: f64,
    cap: usize,
) -> Result<f64> {
    let lp = gen.log_prob(&TokenSeq::compose(summary, prompt), response)?.as_f64();
    let lq = gen_ref.log_prob(&TokenSeq::compose(&TokenSeq::empty(), prompt), response)?.as_f64();
    Ok(beta * (lp - lq) + beta * partition(gen, gen_ref, prompt, summary, cap)?.ln())
}

/// `P(y_c ≻ y_r | x, z) = σ(r(y_c) - r(y_r)) = σ(β Δ)`.
pub fn bt_probability<T: Scalar, G: SequenceModel<T> + ?Sized, R: SequenceModel<T> + ?Sized>(
    gen: &G,
    gen_ref: &R,
    pair: &PreferencePair,
    summary: &TokenSeq,
    beta: f64,
) -> Result<f64> {
    Ok(log_sigmoid(beta * log_ratio_margin(gen, gen_ref, pair, summary)?.as_f64()).exp())
}

/// Distinct pairs across the slice, in first-seen order.
pub fn items_from_users(users: &[UserRecord]) -> Vec<PreferencePair> {
    let mut seen = std::collections::BTreeSet::new();
    let mut items = Vec::new();
    for u in users {
        for p in &u.pairs {
            if seen.insert(p.clone()) {
                items.push(p.clone());
            }
        }
    }
    items
}

/// A fully enumerated instance.
#[derive(Clone, Debug)]
pub struct InfoInstance<'a> {
    pub layout: &'a TokenLayout,
    pub users: &'a [UserRecord],
    pub items: Vec<PreferencePair>,
    pub temperature: f64,
    pub beta: f64,
    pub cap: usize,
}

impl<'a> InfoInstance<'a> {
    pub fn new(layout: &'a TokenLayout, users: &'a [UserRecord], temperature: f64, beta: f64, cap: usize) -> Result<Self> {
        if users.is_empty() {
            return Err(invalid("empty user slice"));
        }
        if !(beta > 0.0) || !(temperature > 0.0) {
            return Err(invalid("beta and temperature must be positive"));
        }
        let items = items_from_users(users);
        if items.is_empty() {
            return Err(invalid("no items in the slice"));
        }
        Ok(Self { layout, users, items, temperature, beta, cap })
    }

    /// `P(item's first response preferred | u)` for every user and item.
    fn true_labels(&self) -> Vec<Vec<f64>> {
        self.users
            .iter()
            .map(|u| self.items.iter().map(|q| bt_preference(self.layout, u.persona(), &q.chosen, &q.rejected, self.temperature)).collect())
            .collect()
    }
}

struct Tables {
    /// Summary support in canonical order.
    support: Vec<TokenSeq>,
    /// `π(z | c_u)` indexed `[u][z]`.
    channel: Vec<Vec<f64>>,
    /// `log P_θ(first | q, z)` and `log P_θ(second | q, z)` indexed `[z][q]`.
    log_model: Vec<Vec<(f64, f64)>>,
    /// `P(first | u, q)` indexed `[u][q]`.
    truth: Vec<Vec<f64>>,
}

fn check_response_space<T: Scalar, G: SequenceModel<T> + ?Sized>(gen: &G, cap: usize) -> Result<()> {
    let size = support_size(gen.vocab(), gen.max_len());
    if size > cap as u128 {
        return Err(PopiError::EnumerationTooLarge { size, cap });
    }
    Ok(())
}

fn build_channel<T, I>(inf: &I, inst: &InfoInstance<'_>) -> Result<(Vec<TokenSeq>, Vec<Vec<f64>>)>
where
    T: Scalar,
    I: SequenceModel<T> + ?Sized,
{
    let mut index: BTreeMap<TokenSeq, usize> = BTreeMap::new();
    let mut per_user = Vec::with_capacity(inst.users.len());
    for u in inst.users {
        let d = inf.enumerate(&TokenSeq::compose(&u.signals, &TokenSeq::empty()), inf.max_len(), inst.cap)?;
        for z in &d.support {
            let n = index.len();
            index.entry(z.clone()).or_insert(n);
        }
        per_user.push(d);
    }
    let mut support = vec![TokenSeq::empty(); index.len()];
    for (z, &i) in &index {
        support[i] = z.clone();
    }
    let channel = per_user
        .iter()
        .map(|d| {
            let mut row = vec![0.0; support.len()];
            for (z, lp) in d.support.iter().zip(&d.log_probs) {
                row[index[z]] += lp.as_f64().exp();
            }
            row
        })
        .collect();
    Ok((support, channel))
}

fn build_tables<T, G, R, I>(gen: &G, gen_ref: &R, inf: &I, inst: &InfoInstance<'_>) -> Result<Tables>
where
    T: Scalar,
    G: SequenceModel<T> + ?Sized,
    R: SequenceModel<T> + ?Sized,
    I: SequenceModel<T> + ?Sized,
{
    check_response_space(gen, inst.cap)?;
    check_response_space(gen_ref, inst.cap)?;
    let (support, channel) = build_channel(inf, inst)?;
    let mut log_model = Vec::with_capacity(support.len());
    for z in &support {
        let row = inst
            .items
            .iter()
            .map(|q| {
                let bd = inst.beta * log_ratio_margin(gen, gen_ref, q, z)?.as_f64();
                Ok((log_sigmoid(bd), log_sigmoid(-bd)))
            })
            .collect::<Result<Vec<_>>>()?;
        log_model.push(row);
    }
    Ok(Tables { support, channel, log_model, truth: inst.true_labels() })
}

/// Tables whose label model is the exact posterior `P(ℓ | q, z)`: the best any
/// generator could do for this channel, so the KL term vanishes.
fn calibrated_tables<T, I>(inf: &I, inst: &InfoInstance<'_>) -> Result<Tables>
where
    T: Scalar,
    I: SequenceModel<T> + ?Sized,
{
    let (support, channel) = build_channel(inf, inst)?;
    let truth = inst.true_labels();
    let log_model = (0..support.len())
        .map(|zi| {
            let pz: f64 = channel.iter().map(|row| row[zi]).sum();
            (0..inst.items.len())
                .map(|q| {
                    if pz == 0.0 {
                        return (0.5f64.ln(), 0.5f64.ln());
                    }
                    let post = (channel.iter().zip(&truth).map(|(row, t)| row[zi] * t[q]).sum::<f64>() / pz).clamp(0.0, 1.0);
                    (post.ln(), (1.0 - post).ln())
                })
                .collect()
        })
        .collect();
    Ok(Tables { support, channel, log_model, truth })
}

fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

fn binary_entropy(p: f64) -> f64 {
    -(xlogx(p) + xlogx(1.0 - p))
}

/// Cross-entropy of a Bernoulli(`t`) label against log-probabilities `(lf, ls)`.
fn cross_entropy(t: f64, (lf, ls): (f64, f64)) -> f64 {
    let a = if t > 0.0 { -t * lf } else { 0.0 };
    let b = if t < 1.0 { -(1.0 - t) * ls } else { 0.0 };
    a + b
}

fn report_from_tables(t: &Tables) -> InfoReport {
    let nu = t.channel.len() as f64;
    let nq = t.truth[0].len();
    let pq = 1.0 / nq as f64;
    let mut l_sa = 0.0;
    for (u, row) in t.channel.iter().enumerate() {
        for (zi, &pz) in row.iter().enumerate() {
            if pz == 0.0 {
                continue;
            }
            let ce: f64 = (0..nq).map(|q| cross_entropy(t.truth[u][q], t.log_model[zi][q])).sum();
            l_sa += pz * ce * pq / nu;
        }
    }
    let mut entropy_h = 0.0;
    for q in 0..nq {
        let marginal = t.truth.iter().map(|row| row[q]).sum::<f64>() / nu;
        entropy_h += pq * binary_entropy(marginal);
    }
    let mut cond_h = 0.0;
    let mut kl = 0.0;
    for zi in 0..t.support.len() {
        let pz: f64 = t.channel.iter().map(|row| row[zi]).sum::<f64>() / nu;
        if pz == 0.0 {
            continue;
        }
        for q in 0..nq {
            let post = t.channel.iter().zip(&t.truth).map(|(row, tr)| row[zi] * tr[q]).sum::<f64>() / nu / pz;
            let post = post.clamp(0.0, 1.0);
            let h = binary_entropy(post);
            cond_h += pq * pz * h;
            kl += pq * pz * (cross_entropy(post, t.log_model[zi][q]) - h);
        }
    }
    InfoReport::from_parts(l_sa, kl, entropy_h, entropy_h - cond_h)
}

/// Every field from exact sums; no sampling.
pub fn exact_info_report<T, G, R, I>(gen: &G, gen_ref: &R, inf: &I, inst: &InfoInstance<'_>) -> Result<InfoReport>
where
    T: Scalar,
    G: SequenceModel<T> + ?Sized,
    R: SequenceModel<T> + ?Sized,
    I: SequenceModel<T> + ?Sized,
{
    Ok(report_from_tables(&build_tables(gen, gen_ref, inf, inst)?))
}

fn grad_from_tables<T: Scalar>(tables: &Tables, inf: &Policy<T>, inst: &InfoInstance<'_>) -> Result<Vec<T>> {
    let nu = inst.users.len() as f64;
    let nq = inst.items.len();
    let mut grad = vec![T::zero(); inf.num_params()];
    for (u, user) in inst.users.iter().enumerate() {
        let ctx = TokenSeq::compose(&user.signals, &TokenSeq::empty());
        for (zi, z) in tables.support.iter().enumerate() {
            let pz = tables.channel[u][zi];
            if pz == 0.0 {
                continue;
            }
            let loss: f64 = (0..nq).map(|q| cross_entropy(tables.truth[u][q], tables.log_model[zi][q])).sum::<f64>() / nq as f64;
            inf.accumulate_grad_log_prob(&ctx, z, T::lit(pz * loss / nu), &mut grad)?;
        }
    }
    Ok(grad)
}

/// Exact gradient of `l_sa` with respect to the inference policy.
pub fn grad_l_sa_wrt_inf<T, G, R>(gen: &G, gen_ref: &R, inf: &Policy<T>, inst: &InfoInstance<'_>) -> Result<(InfoReport, Vec<T>)>
where
    T: Scalar,
    G: SequenceModel<T> + ?Sized,
    R: SequenceModel<T> + ?Sized,
{
    let tables = build_tables(gen, gen_ref, inf, inst)?;
    let grad = grad_from_tables(&tables, inf, inst)?;
    Ok((report_from_tables(&tables), grad))
}

/// Report for the channel alone, with the label model set to the posterior.
/// `kl_term` is zero and `l_sa = H - I`.
pub fn calibrated_info_report<T: Scalar, I: SequenceModel<T> + ?Sized>(inf: &I, inst: &InfoInstance<'_>) -> Result<InfoReport> {
    Ok(report_from_tables(&calibrated_tables(inf, inst)?))
}

/// Plain gradient descent on `l_sa` over the inference policy; returns the
/// report before every step and after the last one.
pub fn descend_inference<T, G, R>(
    gen: &G,
    gen_ref: &R,
    inf: &Policy<T>,
    inst: &InfoInstance<'_>,
    steps: usize,
    lr: f64,
) -> Result<(Policy<T>, Vec<InfoReport>)>
where
    T: Scalar,
    G: SequenceModel<T> + ?Sized,
    R: SequenceModel<T> + ?Sized,
{
    let mut policy = inf.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (report, grad) = grad_l_sa_wrt_inf(gen, gen_ref, &policy, inst)?;
        trace.push(report);
        policy.apply_update(&grad, T::lit(-lr))?;
    }
    trace.push(exact_info_report(gen, gen_ref, &policy, inst)?);
    Ok((policy, trace))
}

/// Gradient descent on `l_sa` with the generator re-fit to the posterior at
/// every step, which holds the KL term at zero. The posterior is a minimiser
/// over label models, so by the envelope theorem the gradient is the ordinary
/// score-function gradient with the posterior plugged in. Steps backtrack
/// (halving `lr`) until the loss does not increase; `lr` grows again by half
/// after each accepted step.
pub fn descend_inference_calibrated<T: Scalar>(
    inf: &Policy<T>,
    inst: &InfoInstance<'_>,
    steps: usize,
    lr: f64,
) -> Result<(Policy<T>, Vec<InfoReport>)> {
    let mut policy = inf.clone();
    let mut tables = calibrated_tables(&policy, inst)?;
    let mut report = report_from_tables(&tables);
    let mut trace = vec![report];
    let mut step_lr = lr;
    for _ in 0..steps {
        let grad = grad_from_tables(&tables, &policy, inst)?;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = policy.clone();
            trial.apply_update(&grad, T::lit(-step_lr))?;
            let t = calibrated_tables(&trial, inst)?;
            let r = report_from_tables(&t);
            if r.l_sa <= report.l_sa {
                accepted = Some((trial, t, r));
                break;
            }
            step_lr *= 0.5;
        }
        let Some((p, t, r)) = accepted else { break };
        (policy, tables, report) = (p, t, r);
        trace.push(report);
        step_lr *= 1.5;
    }
    Ok((policy, trace))
}
