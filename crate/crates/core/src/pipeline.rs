//! Usage-time composition: infer a summary from user signals, then generate a
//! response conditioned on `summary ⊕ SEP ⊕ prompt`.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{invalid, PopiError, Result};
use crate::policy::{Policy, SequenceModel, TokenSeq};
use crate::scalar::Scalar;
use crate::seed;
use crate::synthworld::UserRecord;

/// Summary from user signals alone: `z ~ π_φ(· | c ⊕ SEP)`.
pub fn infer_summary<T: Scalar, M: SequenceModel<T> + ?Sized>(inf: &M, signals: &TokenSeq, seed: u64) -> Result<TokenSeq> {
    inf.sample(&TokenSeq::compose(signals, &TokenSeq::empty()), seed, inf.max_len())
}

/// Summary conditioned on the upcoming prompt too: `z ~ π_φ(· | c ⊕ SEP ⊕ x)`.
pub fn infer_summary_prompt_dependent<T: Scalar, M: SequenceModel<T> + ?Sized>(
    inf: &M,
    signals: &TokenSeq,
    prompt: &TokenSeq,
    seed: u64,
) -> Result<TokenSeq> {
    inf.sample(&TokenSeq::compose(signals, prompt), seed, inf.max_len())
}

/// `y ~ π(· | summary ⊕ SEP ⊕ prompt)`. Works on frozen policies; nothing is written.
pub fn personalized_generate<T: Scalar, M: SequenceModel<T> + ?Sized>(
    gen: &M,
    prompt: &TokenSeq,
    summary: &TokenSeq,
    seed: u64,
) -> Result<TokenSeq> {
    gen.sample(&TokenSeq::compose(summary, prompt), seed, gen.max_len())
}

/// What a generator sees in front of the prompt.
#[derive(Clone, Copy)]
pub enum Conditioning<'a, T: Scalar> {
    /// Nothing: base-model behaviour.
    None,
    /// The user's raw signal tokens.
    RawSignals,
    /// A summary sampled from an inference policy.
    Summaries(&'a dyn SequenceModel<T>),
}

impl<'a, T: Scalar> Conditioning<'a, T> {
    pub fn summaries(inf: &'a Policy<T>) -> Self {
        Conditioning::Summaries(inf)
    }

    /// Context prefix for `user`; summaries are drawn with `seed`.
    pub fn prefix(&self, user: &UserRecord, seed: u64) -> Result<TokenSeq> {
        match self {
            Conditioning::None => Ok(TokenSeq::empty()),
            Conditioning::RawSignals => Ok(user.signals.clone()),
            Conditioning::Summaries(inf) => infer_summary(*inf, &user.signals, seed),
        }
    }
}

/// Per-pass cache of prompt-independent summaries. Each user's summary is
/// inferred once and reused for all of that user's prompts; a second
/// inference request for the same user is an error.
pub struct SummaryCache<'a, T: Scalar> {
    conditioning: Conditioning<'a, T>,
    seed: u64,
    cache: RefCell<HashMap<usize, TokenSeq>>,
    calls: RefCell<HashMap<usize, usize>>,
}

impl<'a, T: Scalar> SummaryCache<'a, T> {
    pub fn new(conditioning: Conditioning<'a, T>, seed: u64) -> Self {
        Self { conditioning, seed, cache: RefCell::new(HashMap::new()), calls: RefCell::new(HashMap::new()) }
    }

    pub fn prefix(&self, user_index: usize, user: &UserRecord) -> Result<TokenSeq> {
        if let Some(z) = self.cache.borrow().get(&user_index) {
            return Ok(z.clone());
        }
        let mut calls = self.calls.borrow_mut();
        let n = calls.entry(user_index).or_insert(0);
        *n += 1;
        if *n > 1 {
            return Err(PopiError::Invariant(format!("summary for user {user_index} inferred twice in one pass")));
        }
        let z = self.conditioning.prefix(user, seed::derive(self.seed, &[user_index as u64]))?;
        self.cache.borrow_mut().insert(user_index, z.clone());
        Ok(z)
    }

    pub fn inference_calls(&self, user_index: usize) -> usize {
        self.calls.borrow().get(&user_index).copied().unwrap_or(0)
    }

    /// Every prefix produced so far, in user order.
    pub fn prefixes(&self) -> Vec<(usize, TokenSeq)> {
        let mut v: Vec<_> = self.cache.borrow().iter().map(|(&k, z)| (k, z.clone())).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }
}

/// Checks that a combined context fits a model's window before sampling.
pub fn check_window(window: usize, context: &TokenSeq) -> Result<()> {
    if context.len() > window {
        return Err(invalid(format!("context length {} exceeds window {window}", context.len())));
    }
    Ok(())
}
