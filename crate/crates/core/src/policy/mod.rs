//! Small autoregressive categorical policies.
//!
//! A policy maps a context (prompt, summary or user signals, as token ids) to a
//! distribution over variable-length token sequences. Each step is a two-layer
//! perceptron over the concatenation of
//!
//! ```text
//! [ mean(E[context]) ; mean(E[prefix so far]) ; P[position] ]
//! ```
//!
//! followed by a softmax over the vocabulary. Token `0` is end-of-sequence and
//! is always part of the sequence probability; at position `max_len` EOS is
//! forced, so the distribution over sequences of length `<= max_len` is proper.
//! The spaces are small enough to enumerate every sequence exactly.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PopiError, Result};
use crate::scalar::{log_softmax_in_place, Scalar};
use crate::seed;

/// End-of-sequence token id.
pub const EOS: u32 = 0;
/// Separator between a conditioning prefix and the prompt.
pub const SEP: u32 = 1;

/// Default cap on the number of sequences an exact enumeration may visit.
pub const DEFAULT_ENUMERATION_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(invalid(format!("vocab size must be >= 2, got {size}")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, token: u32) -> bool {
        (token as usize) < self.size
    }
}

/// An ordered list of token ids. The terminating EOS is implicit and never stored.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `prefix ⊕ SEP ⊕ prompt`, the context layout used for every conditional call.
    pub fn compose(prefix: &TokenSeq, prompt: &TokenSeq) -> TokenSeq {
        let mut t = Vec::with_capacity(prefix.len() + 1 + prompt.len());
        t.extend_from_slice(&prefix.0);
        t.push(SEP);
        t.extend_from_slice(&prompt.0);
        TokenSeq(t)
    }

    /// Checks ids against `vocab`, rejects embedded EOS and enforces `max_len`.
    pub fn validate(&self, vocab: Vocab, max_len: usize) -> Result<()> {
        if self.len() > max_len {
            return Err(invalid(format!("sequence length {} exceeds {max_len}", self.len())));
        }
        for &t in &self.0 {
            if !vocab.contains(t) {
                return Err(invalid(format!("token {t} out of range for vocab {}", vocab.size())));
            }
            if t == EOS {
                return Err(invalid("EOS token inside a sequence"));
            }
        }
        Ok(())
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// Architecture dimensions of a policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Longest accepted context.
    pub context_window: usize,
    /// Longest generated sequence; EOS is forced afterwards.
    pub max_len: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.context_window == 0 || self.max_len == 0 {
            return Err(invalid(format!("architecture dims must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn num_params(&self, vocab: Vocab) -> usize {
        Layout::new(vocab, *self).total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Inference,
    Generation,
    InferenceReference,
    GenerationReference,
    OffTheShelf,
}

impl Role {
    pub(crate) fn code(self) -> u8 {
        match self {
            Role::Inference => 0,
            Role::Generation => 1,
            Role::InferenceReference => 2,
            Role::GenerationReference => 3,
            Role::OffTheShelf => 4,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Role::Inference,
            1 => Role::Generation,
            2 => Role::InferenceReference,
            3 => Role::GenerationReference,
            4 => Role::OffTheShelf,
            _ => return None,
        })
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    v: usize,
    d: usize,
    h: usize,
    emb: usize,
    pos: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl Layout {
    fn new(vocab: Vocab, arch: Arch) -> Self {
        let (v, d, h) = (vocab.size(), arch.embed_dim, arch.hidden_dim);
        let emb = 0;
        let pos = emb + v * d;
        let w1 = pos + arch.max_len * d;
        let b1 = w1 + h * 3 * d;
        let w2 = b1 + h;
        let b2 = w2 + v * h;
        Self { v, d, h, emb, pos, w1, b1, w2, b2, total: b2 + v }
    }
}

/// Exact distribution over every sequence of length `<= max_len`.
#[derive(Clone, Debug)]
pub struct ExactDistribution<T> {
    pub support: Vec<TokenSeq>,
    pub log_probs: Vec<T>,
}

impl<T: Scalar> ExactDistribution<T> {
    pub fn probs(&self) -> Vec<T> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn total_mass(&self) -> T {
        self.log_probs.iter().map(|l| l.exp()).sum()
    }

    /// `KL(self || other)`; both must come from the same enumeration order.
    pub fn kl(&self, other: &ExactDistribution<T>) -> Result<T> {
        if self.support != other.support {
            return Err(invalid("KL between distributions with different supports"));
        }
        Ok(self
            .log_probs
            .iter()
            .zip(&other.log_probs)
            .map(|(&lp, &lq)| if lp == T::neg_infinity() { T::zero() } else { lp.exp() * (lp - lq) })
            .sum())
    }
}

/// Number of sequences of length `<= max_len` over `vocab` (EOS excluded from bodies).
pub fn support_size(vocab: Vocab, max_len: usize) -> u128 {
    let base = (vocab.size() - 1) as u128;
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=max_len {
        total = total.saturating_add(level);
        level = level.saturating_mul(base);
    }
    total
}

/// Read-only sequence model interface. Objectives, evaluation and the
/// information report only need forward evaluation, so they accept anything
/// implementing this; training requires a concrete [`Policy`].
pub trait SequenceModel<T: Scalar> {
    fn vocab(&self) -> Vocab;
    fn max_len(&self) -> usize;
    fn log_prob(&self, context: &TokenSeq, seq: &TokenSeq) -> Result<T>;
    fn sample(&self, context: &TokenSeq, seed: u64, max_len: usize) -> Result<TokenSeq>;
    fn enumerate(&self, context: &TokenSeq, max_len: usize, cap: usize) -> Result<ExactDistribution<T>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T> {
    vocab: Vocab,
    arch: Arch,
    role: Role,
    frozen: bool,
    params: Vec<T>,
}

/// Intermediate values of one step, kept for backpropagation.
struct StepCache<T> {
    x: Vec<T>,
    a: Vec<T>,
    logp: Vec<T>,
}

impl<T: Scalar> Policy<T> {
    /// Parameters drawn from a seeded uniform(-0.1, 0.1).
    pub fn new(vocab: Vocab, arch: Arch, role: Role, seed: u64) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params(vocab);
        let mut rng = seed::rng(seed);
        let params = (0..n).map(|_| T::lit(rng.gen_range(-0.1..0.1))).collect();
        Ok(Self { vocab, arch, role, frozen: false, params })
    }

    /// All parameters zero: every step is uniform over the vocabulary.
    pub fn zeros(vocab: Vocab, arch: Arch, role: Role) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params(vocab);
        Ok(Self { vocab, arch, role, frozen: false, params: vec![T::zero(); n] })
    }

    pub fn from_params(vocab: Vocab, arch: Arch, role: Role, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params(vocab) {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                arch.num_params(vocab),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(PopiError::Numeric("non-finite parameter".into()));
        }
        Ok(Self { vocab, arch, role, frozen: false, params })
    }

    /// A policy that emits `output` with probability one regardless of context.
    /// Needs `embed_dim >= max_len` and `hidden_dim >= max_len`.
    pub fn constant_output(vocab: Vocab, arch: Arch, role: Role, output: &TokenSeq) -> Result<Self> {
        output.validate(vocab, arch.max_len)?;
        if arch.embed_dim < arch.max_len || arch.hidden_dim < arch.max_len {
            return Err(invalid("constant_output needs embed_dim and hidden_dim >= max_len"));
        }
        let mut p = Self::zeros(vocab, arch, role)?;
        let l = Layout::new(vocab, arch);
        let gain = T::lit(500.0);
        let sat = T::lit(5.0_f64.tanh());
        for t in 0..arch.max_len {
            p.params[l.pos + t * l.d + t] = T::one();
            p.params[l.w1 + t * 3 * l.d + 2 * l.d + t] = T::lit(10.0);
            p.params[l.b1 + t] = T::lit(-5.0);
            let target = output.tokens().get(t).copied().unwrap_or(EOS) as usize;
            p.params[l.w2 + target * l.h + t] = gain;
            p.params[l.b2 + target] += gain * sat;
        }
        Ok(p)
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Unfrozen copy with a new role, e.g. a trainable generator started from its reference.
    pub fn cloned_as(&self, role: Role) -> Self {
        Self { role, frozen: false, ..self.clone() }
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if self.frozen {
            return Err(PopiError::FrozenPolicy);
        }
        if params.len() != self.params.len() {
            return Err(invalid("parameter vector length mismatch"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(PopiError::Numeric("non-finite parameter".into()));
        }
        self.params = params;
        Ok(())
    }

    /// `params += scale * delta`.
    pub fn apply_update(&mut self, delta: &[T], scale: T) -> Result<()> {
        if self.frozen {
            return Err(PopiError::FrozenPolicy);
        }
        if delta.len() != self.params.len() {
            return Err(invalid("update length mismatch"));
        }
        let next: Vec<T> = self.params.iter().zip(delta).map(|(&p, &d)| p + scale * d).collect();
        if next.iter().any(|p| !p.is_finite()) {
            return Err(PopiError::Numeric("update produced a non-finite parameter".into()));
        }
        self.params = next;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn params_mut_unchecked(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Zeroes the weights reading the pooled context, so the policy ignores it.
    #[cfg(test)]
    pub(crate) fn blind_to_context(&mut self) {
        let l = self.layout();
        for j in 0..l.h {
            for k in 0..l.d {
                self.params[l.w1 + j * 3 * l.d + k] = T::zero();
            }
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.vocab, self.arch)
    }

    fn check_context(&self, context: &TokenSeq) -> Result<()> {
        if context.len() > self.arch.context_window {
            return Err(invalid(format!(
                "context length {} exceeds window {}",
                context.len(),
                self.arch.context_window
            )));
        }
        context.validate(self.vocab, usize::MAX)
    }

    fn mean_embedding(&self, l: &Layout, tokens: &[u32]) -> Vec<T> {
        let mut m = vec![T::zero(); l.d];
        if tokens.is_empty() {
            return m;
        }
        for &t in tokens {
            let row = &self.params[l.emb + t as usize * l.d..][..l.d];
            for (acc, &e) in m.iter_mut().zip(row) {
                *acc += e;
            }
        }
        let inv = T::one() / T::lit(tokens.len() as f64);
        m.iter_mut().for_each(|x| *x *= inv);
        m
    }

    fn step(&self, l: &Layout, ctx_mean: &[T], prefix_sum: &[T], prefix_len: usize, pos: usize) -> StepCache<T> {
        let d = l.d;
        let mut x = Vec::with_capacity(3 * d);
        x.extend_from_slice(ctx_mean);
        if prefix_len == 0 {
            x.extend(std::iter::repeat(T::zero()).take(d));
        } else {
            let inv = T::one() / T::lit(prefix_len as f64);
            x.extend(prefix_sum.iter().map(|&s| s * inv));
        }
        x.extend_from_slice(&self.params[l.pos + pos * d..][..d]);

        let w1 = &self.params[l.w1..l.b1];
        let b1 = &self.params[l.b1..l.w2];
        let a: Vec<T> = (0..l.h)
            .map(|j| {
                let row = &w1[j * 3 * d..][..3 * d];
                let z = row.iter().zip(&x).fold(b1[j], |acc, (&w, &xi)| acc + w * xi);
                z.tanh()
            })
            .collect();
        let w2 = &self.params[l.w2..l.b2];
        let b2 = &self.params[l.b2..l.total];
        let mut logp: Vec<T> = (0..l.v)
            .map(|v| {
                let row = &w2[v * l.h..][..l.h];
                row.iter().zip(&a).fold(b2[v], |acc, (&w, &ai)| acc + w * ai)
            })
            .collect();
        log_softmax_in_place(&mut logp);
        StepCache { x, a, logp }
    }

    /// Backpropagates `dlogits` through one step. Context and prefix gradients
    /// are returned through `dctx`/`dprefix` so the caller can spread them over
    /// the pooled tokens.
    fn backward_step(
        &self,
        l: &Layout,
        cache: &StepCache<T>,
        dlogits: &[T],
        pos: usize,
        grad: &mut [T],
        dctx: &mut [T],
        dprefix: &mut [T],
    ) {
        let d = l.d;
        let w2 = &self.params[l.w2..l.b2];
        let mut dz1 = vec![T::zero(); l.h];
        for v in 0..l.v {
            let g = dlogits[v];
            if g == T::zero() {
                continue;
            }
            grad[l.b2 + v] += g;
            let row = &w2[v * l.h..][..l.h];
            let grow = &mut grad[l.w2 + v * l.h..][..l.h];
            for j in 0..l.h {
                grow[j] += g * cache.a[j];
                dz1[j] += row[j] * g;
            }
        }
        for j in 0..l.h {
            dz1[j] *= T::one() - cache.a[j] * cache.a[j];
        }
        let w1 = &self.params[l.w1..l.b1];
        let mut dx = vec![T::zero(); 3 * d];
        for j in 0..l.h {
            let g = dz1[j];
            if g == T::zero() {
                continue;
            }
            grad[l.b1 + j] += g;
            let row = &w1[j * 3 * d..][..3 * d];
            let grow = &mut grad[l.w1 + j * 3 * d..][..3 * d];
            for k in 0..3 * d {
                grow[k] += g * cache.x[k];
                dx[k] += row[k] * g;
            }
        }
        for k in 0..d {
            dctx[k] += dx[k];
            dprefix[k] = dx[d + k];
            grad[l.pos + pos * d + k] += dx[2 * d + k];
        }
    }

    fn scatter_embedding_grad(l: &Layout, tokens: &[u32], dmean: &[T], grad: &mut [T]) {
        if tokens.is_empty() {
            return;
        }
        let inv = T::one() / T::lit(tokens.len() as f64);
        for &t in tokens {
            let g = &mut grad[l.emb + t as usize * l.d..][..l.d];
            for (gi, &dm) in g.iter_mut().zip(dmean) {
                *gi += dm * inv;
            }
        }
    }

    /// Per-step log-distributions along `seq` (one entry per non-forced step).
    fn trajectory(&self, context: &TokenSeq, seq: &TokenSeq, horizon: usize) -> Vec<StepCache<T>> {
        let l = self.layout();
        let ctx_mean = self.mean_embedding(&l, context.tokens());
        let mut prefix_sum = vec![T::zero(); l.d];
        let steps = if seq.len() == horizon { horizon } else { seq.len() + 1 };
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            out.push(self.step(&l, &ctx_mean, &prefix_sum, t, t));
            if t < seq.len() {
                let tok = seq.tokens()[t] as usize;
                let row = &self.params[l.emb + tok * l.d..][..l.d];
                prefix_sum.iter_mut().zip(row).for_each(|(s, &e)| *s += e);
            }
        }
        out
    }

    fn check_seq(&self, context: &TokenSeq, seq: &TokenSeq, horizon: usize) -> Result<()> {
        self.check_context(context)?;
        seq.validate(self.vocab, horizon)
    }

    /// Log-probability of `seq` when generation is truncated at `horizon`.
    pub fn log_prob_with_horizon(&self, context: &TokenSeq, seq: &TokenSeq, horizon: usize) -> Result<T> {
        if horizon == 0 || horizon > self.arch.max_len {
            return Err(invalid(format!("horizon must be in 1..={}", self.arch.max_len)));
        }
        self.check_seq(context, seq, horizon)?;
        let traj = self.trajectory(context, seq, horizon);
        let mut lp = T::zero();
        for (t, c) in traj.iter().enumerate() {
            let tok = seq.tokens().get(t).copied().unwrap_or(EOS) as usize;
            lp += c.logp[tok];
        }
        if !lp.is_finite() {
            return Err(PopiError::Numeric("non-finite log-probability".into()));
        }
        Ok(lp)
    }

    pub fn log_prob(&self, context: &TokenSeq, seq: &TokenSeq) -> Result<T> {
        self.log_prob_with_horizon(context, seq, self.arch.max_len)
    }

    /// Per-step token distributions along `seq`, including the EOS step unless forced.
    pub fn step_distributions(&self, context: &TokenSeq, seq: &TokenSeq) -> Result<Vec<Vec<T>>> {
        self.check_seq(context, seq, self.arch.max_len)?;
        Ok(self
            .trajectory(context, seq, self.arch.max_len)
            .into_iter()
            .map(|c| c.logp.into_iter().map(|l| l.exp()).collect())
            .collect())
    }

    /// `grad += weight * ∇ log π(seq | context)`. Returns the log-probability.
    pub fn accumulate_grad_log_prob(&self, context: &TokenSeq, seq: &TokenSeq, weight: T, grad: &mut [T]) -> Result<T> {
        if self.frozen {
            return Err(PopiError::FrozenPolicy);
        }
        self.check_seq(context, seq, self.arch.max_len)?;
        let l = self.layout();
        let traj = self.trajectory(context, seq, self.arch.max_len);
        let mut lp = T::zero();
        let mut dctx = vec![T::zero(); l.d];
        let mut dprefix = vec![T::zero(); l.d];
        let mut dlogits = vec![T::zero(); l.v];
        for (t, c) in traj.iter().enumerate() {
            let tok = seq.tokens().get(t).copied().unwrap_or(EOS) as usize;
            lp += c.logp[tok];
            for v in 0..l.v {
                dlogits[v] = -weight * c.logp[v].exp();
            }
            dlogits[tok] += weight;
            self.backward_step(&l, c, &dlogits, t, grad, &mut dctx, &mut dprefix);
            Self::scatter_embedding_grad(&l, &seq.tokens()[..t], &dprefix, grad);
        }
        Self::scatter_embedding_grad(&l, context.tokens(), &dctx, grad);
        if !lp.is_finite() {
            return Err(PopiError::Numeric("non-finite log-probability".into()));
        }
        Ok(lp)
    }

    pub fn grad_log_prob(&self, context: &TokenSeq, seq: &TokenSeq) -> Result<Vec<T>> {
        let mut g = vec![T::zero(); self.params.len()];
        self.accumulate_grad_log_prob(context, seq, T::one(), &mut g)?;
        Ok(g)
    }

    /// Per-token analytic KL `Σ_t KL(π(·|ctx, seq<t) || ref(·|ctx, seq<t))` along
    /// `seq`, accumulating `weight * ∇` of that sum with the trajectory held fixed.
    pub fn accumulate_grad_token_kl(
        &self,
        reference: &Policy<T>,
        context: &TokenSeq,
        seq: &TokenSeq,
        weight: T,
        grad: &mut [T],
    ) -> Result<T> {
        if self.frozen {
            return Err(PopiError::FrozenPolicy);
        }
        self.check_seq(context, seq, self.arch.max_len)?;
        let l = self.layout();
        let traj = self.trajectory(context, seq, self.arch.max_len);
        let rtraj = reference.trajectory(context, seq, self.arch.max_len.min(reference.arch.max_len));
        let mut total = T::zero();
        let mut dctx = vec![T::zero(); l.d];
        let mut dprefix = vec![T::zero(); l.d];
        let mut dlogits = vec![T::zero(); l.v];
        for (t, (c, r)) in traj.iter().zip(&rtraj).enumerate() {
            let kl: T = c.logp.iter().zip(&r.logp).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
            total += kl;
            for v in 0..l.v {
                dlogits[v] = weight * c.logp[v].exp() * (c.logp[v] - r.logp[v] - kl);
            }
            self.backward_step(&l, c, &dlogits, t, grad, &mut dctx, &mut dprefix);
            Self::scatter_embedding_grad(&l, &seq.tokens()[..t], &dprefix, grad);
        }
        Self::scatter_embedding_grad(&l, context.tokens(), &dctx, grad);
        Ok(total)
    }

    pub fn token_kl(&self, reference: &Policy<T>, context: &TokenSeq, seq: &TokenSeq) -> Result<T> {
        self.check_seq(context, seq, self.arch.max_len)?;
        let traj = self.trajectory(context, seq, self.arch.max_len);
        let rtraj = reference.trajectory(context, seq, self.arch.max_len.min(reference.arch.max_len));
        Ok(traj
            .iter()
            .zip(&rtraj)
            .map(|(c, r)| c.logp.iter().zip(&r.logp).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum::<T>())
            .sum())
    }

    /// Draws a sequence. Generation stops at EOS or after `max_len` tokens.
    pub fn sample(&self, context: &TokenSeq, seed: u64, max_len: usize) -> Result<TokenSeq> {
        if max_len == 0 {
            return Err(invalid("max_len must be >= 1"));
        }
        self.check_context(context)?;
        let horizon = max_len.min(self.arch.max_len);
        let l = self.layout();
        let ctx_mean = self.mean_embedding(&l, context.tokens());
        let mut prefix_sum = vec![T::zero(); l.d];
        let mut out = Vec::with_capacity(horizon);
        let mut rng = seed::rng(seed);
        for t in 0..horizon {
            let c = self.step(&l, &ctx_mean, &prefix_sum, t, t);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut tok = l.v - 1;
            for (v, &lp) in c.logp.iter().enumerate() {
                acc += lp.exp().as_f64();
                if u < acc {
                    tok = v;
                    break;
                }
            }
            if tok == EOS as usize {
                break;
            }
            out.push(tok as u32);
            let row = &self.params[l.emb + tok * l.d..][..l.d];
            prefix_sum.iter_mut().zip(row).for_each(|(s, &e)| *s += e);
        }
        Ok(TokenSeq(out))
    }

    /// Every sequence of length `<= max_len` with its exact log-probability.
    pub fn enumerate_distribution(&self, context: &TokenSeq, max_len: usize, cap: usize) -> Result<ExactDistribution<T>> {
        if max_len == 0 || max_len > self.arch.max_len {
            return Err(invalid(format!("max_len must be in 1..={}", self.arch.max_len)));
        }
        self.check_context(context)?;
        let size = support_size(self.vocab, max_len);
        if size > cap as u128 {
            return Err(PopiError::EnumerationTooLarge { size, cap });
        }
        let l = self.layout();
        let ctx_mean = self.mean_embedding(&l, context.tokens());
        let mut dist = ExactDistribution { support: Vec::with_capacity(size as usize), log_probs: Vec::with_capacity(size as usize) };
        let mut prefix = Vec::with_capacity(max_len);
        let prefix_sum = vec![T::zero(); l.d];
        self.enumerate_rec(&l, &ctx_mean, &mut prefix, prefix_sum, T::zero(), max_len, &mut dist);
        Ok(dist)
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate_rec(
        &self,
        l: &Layout,
        ctx_mean: &[T],
        prefix: &mut Vec<u32>,
        prefix_sum: Vec<T>,
        lp: T,
        horizon: usize,
        out: &mut ExactDistribution<T>,
    ) {
        let t = prefix.len();
        if t == horizon {
            out.support.push(TokenSeq(prefix.clone()));
            out.log_probs.push(lp);
            return;
        }
        let c = self.step(l, ctx_mean, &prefix_sum, t, t);
        out.support.push(TokenSeq(prefix.clone()));
        out.log_probs.push(lp + c.logp[EOS as usize]);
        for tok in 1..l.v {
            let mut next_sum = prefix_sum.clone();
            let row = &self.params[l.emb + tok * l.d..][..l.d];
            next_sum.iter_mut().zip(row).for_each(|(s, &e)| *s += e);
            prefix.push(tok as u32);
            self.enumerate_rec(l, ctx_mean, prefix, next_sum, lp + c.logp[tok], horizon, out);
            prefix.pop();
        }
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Policy<U> {
        Policy {
            vocab: self.vocab,
            arch: self.arch,
            role: self.role,
            frozen: self.frozen,
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> SequenceModel<T> for Policy<T> {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn max_len(&self) -> usize {
        self.arch.max_len
    }

    fn log_prob(&self, context: &TokenSeq, seq: &TokenSeq) -> Result<T> {
        Policy::log_prob(self, context, seq)
    }

    fn sample(&self, context: &TokenSeq, seed: u64, max_len: usize) -> Result<TokenSeq> {
        Policy::sample(self, context, seed, max_len)
    }

    fn enumerate(&self, context: &TokenSeq, max_len: usize, cap: usize) -> Result<ExactDistribution<T>> {
        self.enumerate_distribution(context, max_len, cap)
    }
}

#[cfg(test)]
mod tests;
