//! Instruction-pretrained base generators.
//!
//! The reference generator and the off-the-shelf zoo are fitted once, by
//! maximum likelihood, to a user-independent corpus that pairs a short
//! descriptor instruction (e.g. "class 0 up, length down") with responses drawn
//! from the matching tilted distribution
//!
//! ```text
//! p(y | d) ∝ exp(tilt · Σ_k s_k f_k(y)),   s_k ∈ {+1, -1, 0}
//! ```
//!
//! over every content-token response. No user record is involved, so the
//! models know the descriptor language but nothing about any persona. After
//! fitting they are frozen.
//!
//! The reference summarizer is fitted the same way to a generic "copy a few
//! mentions" task over signal-like token streams.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::optim::{warmup_cosine, Optimizer, OptimizerKind};
use crate::policy::{Arch, Policy, Role, TokenSeq};
use crate::scalar::Scalar;
use crate::seed;
use crate::synthworld::TokenLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Strength of the descriptor tilt in the corpus.
    pub tilt: f64,
    /// Probability that a feature is mentioned in an instruction.
    pub mention_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 32, lr: 0.01, warmup: 50, tilt: 3.0, mention_prob: 0.7 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.tilt >= 0.0) || !(0.0..=1.0).contains(&self.mention_prob) {
            return Err(invalid("pretraining config: batch_size > 0, lr > 0, tilt >= 0, mention_prob in [0, 1]"));
        }
        Ok(())
    }
}

/// Architecture and seed of one base generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn arch(&self, layout: &TokenLayout, context_window: usize) -> Arch {
        Arch { embed_dim: self.embed_dim, hidden_dim: self.hidden_dim, context_window, max_len: layout.response_max_len }
    }
}

pub fn default_reference_spec() -> GeneratorSpec {
    GeneratorSpec { embed_dim: 8, hidden_dim: 16, seed: 11 }
}

pub fn default_zoo_specs() -> Vec<GeneratorSpec> {
    vec![
        GeneratorSpec { embed_dim: 6, hidden_dim: 12, seed: 101 },
        GeneratorSpec { embed_dim: 10, hidden_dim: 20, seed: 202 },
        GeneratorSpec { embed_dim: 12, hidden_dim: 16, seed: 303 },
    ]
}

/// Every response made of content tokens with length in `1..=response_max_len`.
pub fn response_space(layout: &TokenLayout) -> Vec<TokenSeq> {
    let content = layout.content_tokens();
    let mut out = Vec::new();
    let mut frontier = vec![Vec::<u32>::new()];
    for _ in 0..layout.response_max_len {
        let mut next = Vec::with_capacity(frontier.len() * content.len());
        for p in &frontier {
            for &t in &content {
                let mut q = p.clone();
                q.push(t);
                out.push(TokenSeq::new(q.clone()));
                next.push(q);
            }
        }
        frontier = next;
    }
    out
}

/// Signs `s_k` named by an instruction (last mention of a feature wins).
pub fn instruction_signs(layout: &TokenLayout, instruction: &TokenSeq) -> Vec<f64> {
    let mut s = vec![0.0; layout.feature_dim];
    for &t in instruction.tokens() {
        if let Some((k, up)) = layout.parse_descriptor(t) {
            s[k] = if up { 1.0 } else { -1.0 };
        }
    }
    s
}

/// Corpus target distribution for an instruction, as probabilities over `space`.
pub fn tilted_distribution(layout: &TokenLayout, space: &[TokenSeq], signs: &[f64], tilt: f64) -> Vec<f64> {
    let scores: Vec<f64> = space
        .iter()
        .map(|y| tilt * layout.response_features(y).iter().zip(signs).map(|(f, s)| f * s).sum::<f64>())
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn random_instruction(layout: &TokenLayout, mention_prob: f64, rng: &mut seed::Rng) -> TokenSeq {
    let mut toks = Vec::new();
    for k in 0..layout.feature_dim {
        let mentioned = rng.gen::<f64>() < mention_prob;
        let up = rng.gen::<bool>();
        if mentioned {
            toks.push(layout.descriptor(k, up));
        }
    }
    toks.shuffle(rng);
    TokenSeq::new(toks)
}

fn random_prompt(layout: &TokenLayout, prompt_max_len: usize, rng: &mut seed::Rng) -> TokenSeq {
    let neutral = layout.neutral_tokens();
    let len = rng.gen_range(1..=prompt_max_len);
    TokenSeq::new((0..len).map(|_| *neutral.choose(rng).unwrap()).collect())
}

fn draw(probs: &[f64], rng: &mut seed::Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Fits a fresh policy to the descriptor corpus and returns it frozen.
pub fn pretrain_generator<T: Scalar>(
    layout: &TokenLayout,
    prompt_max_len: usize,
    context_window: usize,
    spec: GeneratorSpec,
    role: Role,
    cfg: &PretrainConfig,
) -> Result<Policy<T>> {
    cfg.validate()?;
    let arch = spec.arch(layout, context_window);
    let mut policy = Policy::<T>::new(layout.vocab, arch, role, spec.seed)?;
    let space = response_space(layout);
    let mut targets: HashMap<Vec<i8>, Vec<f64>> = HashMap::new();
    let mut rng = seed::rng(seed::derive_named(spec.seed, "pretrain-corpus"));
    let mut opt = Optimizer::new(OptimizerKind::Adam, policy.num_params());
    let mut grad = vec![T::zero(); policy.num_params()];
    let w = T::lit(-1.0 / cfg.batch_size as f64);
    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = T::zero());
        for _ in 0..cfg.batch_size {
            let instruction = random_instruction(layout, cfg.mention_prob, &mut rng);
            let prompt = random_prompt(layout, prompt_max_len, &mut rng);
            let signs = instruction_signs(layout, &instruction);
            let key: Vec<i8> = signs.iter().map(|&s| s as i8).collect();
            let probs = targets.entry(key).or_insert_with(|| tilted_distribution(layout, &space, &signs, cfg.tilt));
            let y = &space[draw(probs, &mut rng)];
            policy.accumulate_grad_log_prob(&TokenSeq::compose(&instruction, &prompt), y, w, &mut grad)?;
        }
        opt.step(&mut policy, &grad, warmup_cosine(cfg.lr, step, cfg.warmup, cfg.steps))?;
    }
    Ok(policy.frozen())
}

/// Corpus for the base summarizer: signal-like token streams whose targets are
/// a few descriptor tokens copied at random from the stream ("mentions").
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummarizerPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub min_context: usize,
    /// Upper bound on the corruption rate of corpus streams.
    pub max_corruption: f64,
}

impl Default for SummarizerPretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 32, lr: 0.01, warmup: 50, min_context: 8, max_corruption: 0.5 }
    }
}

fn random_stream(layout: &TokenLayout, max_len: usize, cfg: &SummarizerPretrainConfig, rng: &mut seed::Rng) -> (TokenSeq, Vec<u32>) {
    let len = rng.gen_range(cfg.min_context.min(max_len)..=max_len);
    let signs: Vec<bool> = (0..layout.feature_dim).map(|_| rng.gen()).collect();
    let corruption = rng.gen::<f64>() * cfg.max_corruption;
    let density = rng.gen_range(0.1..0.6);
    let descriptors = layout.descriptor_tokens();
    let filler: Vec<u32> = layout.content_tokens().into_iter().chain(layout.neutral_tokens()).collect();
    let mut mentions = Vec::new();
    let tokens = (0..len)
        .map(|_| {
            if rng.gen::<f64>() < density {
                let t = if rng.gen::<f64>() < corruption {
                    *descriptors.choose(rng).unwrap()
                } else {
                    let k = rng.gen_range(0..layout.feature_dim);
                    layout.descriptor(k, signs[k])
                };
                mentions.push(t);
                t
            } else {
                *filler.choose(rng).unwrap()
            }
        })
        .collect();
    (TokenSeq::new(tokens), mentions)
}

/// Fits a fresh inference-shaped policy to the mention-copying corpus and
/// returns it frozen. `max_context` is the longest stream (excluding SEP).
pub fn pretrain_summarizer<T: Scalar>(
    layout: &TokenLayout,
    arch: Arch,
    max_context: usize,
    role: Role,
    seed_value: u64,
    cfg: &SummarizerPretrainConfig,
) -> Result<Policy<T>> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.max_corruption) {
        return Err(invalid("summarizer pretraining: batch_size > 0, lr > 0, max_corruption in [0, 1]"));
    }
    if max_context + 1 > arch.context_window {
        return Err(invalid("summarizer corpus exceeds the context window"));
    }
    let mut policy = Policy::<T>::new(layout.vocab, arch, role, seed_value)?;
    let mut rng = seed::rng(seed::derive_named(seed_value, "summarizer-corpus"));
    let mut opt = Optimizer::new(OptimizerKind::Adam, policy.num_params());
    let mut grad = vec![T::zero(); policy.num_params()];
    let w = T::lit(-1.0 / cfg.batch_size as f64);
    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = T::zero());
        for _ in 0..cfg.batch_size {
            let (stream, mentions) = random_stream(layout, max_context, cfg, &mut rng);
            let n = if mentions.is_empty() { 0 } else { rng.gen_range(1..=arch.max_len) };
            let target = TokenSeq::new((0..n).map(|_| *mentions.choose(&mut rng).unwrap()).collect());
            policy.accumulate_grad_log_prob(&TokenSeq::compose(&stream, &TokenSeq::empty()), &target, w, &mut grad)?;
        }
        opt.step(&mut policy, &grad, warmup_cosine(cfg.lr, step, cfg.warmup, cfg.steps))?;
    }
    Ok(policy.frozen())
}

/// Shape of the inference policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSpec {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Longest summary.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for InferenceSpec {
    fn default() -> Self {
        Self { embed_dim: 8, hidden_dim: 16, max_len: 3, seed: 7 }
    }
}

/// Everything needed to build the frozen base models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub context_window: usize,
    pub reference: GeneratorSpec,
    pub zoo: Vec<GeneratorSpec>,
    pub inference: InferenceSpec,
    pub generator_pretrain: PretrainConfig,
    pub summarizer_pretrain: SummarizerPretrainConfig,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            context_window: 80,
            reference: default_reference_spec(),
            zoo: default_zoo_specs(),
            inference: InferenceSpec::default(),
            generator_pretrain: PretrainConfig::default(),
            summarizer_pretrain: SummarizerPretrainConfig::default(),
        }
    }
}

impl BaseConfig {
    pub fn inference_arch(&self) -> Arch {
        let i = self.inference;
        Arch { embed_dim: i.embed_dim, hidden_dim: i.hidden_dim, context_window: self.context_window, max_len: i.max_len }
    }
}

/// Frozen reference generator, zoo and reference summarizer.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModels<T> {
    pub gen_ref: Policy<T>,
    pub zoo: Vec<Policy<T>>,
    pub inf_ref: Policy<T>,
}

/// Pretrains every base model. Model seeds are derived from `seed` and each
/// spec's own seed, so changing `seed` changes every model.
pub fn build_base_models<T: Scalar>(
    layout: &TokenLayout,
    prompt_max_len: usize,
    signal_len: usize,
    cfg: &BaseConfig,
    seed_value: u64,
) -> Result<BaseModels<T>> {
    let reseed = |s: GeneratorSpec| GeneratorSpec { seed: seed::derive(seed_value, &[s.seed]), ..s };
    let w = cfg.context_window;
    let gen_ref = pretrain_generator(layout, prompt_max_len, w, reseed(cfg.reference), Role::GenerationReference, &cfg.generator_pretrain)?;
    let zoo = cfg
        .zoo
        .iter()
        .map(|&s| pretrain_generator(layout, prompt_max_len, w, reseed(s), Role::OffTheShelf, &cfg.generator_pretrain))
        .collect::<Result<Vec<_>>>()?;
    let inf_ref = pretrain_summarizer(
        layout,
        cfg.inference_arch(),
        signal_len,
        Role::InferenceReference,
        seed::derive(seed_value, &[cfg.inference.seed]),
        &cfg.summarizer_pretrain,
    )?;
    Ok(BaseModels { gen_ref, zoo, inf_ref })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::WorldConfig;

    fn layout() -> TokenLayout {
        WorldConfig::default().layout().unwrap()
    }

    #[test]
    fn response_space_size() {
        let l = layout();
        let c = l.content_tokens().len();
        let expect: usize = (1..=l.response_max_len).map(|k| c.pow(k as u32)).sum();
        assert_eq!(response_space(&l).len(), expect);
    }

    #[test]
    fn empty_instruction_is_uniform() {
        let l = layout();
        let s = response_space(&l);
        let p = tilted_distribution(&l, &s, &[0.0; 3], 3.0);
        assert!(p.iter().all(|&x| (x - 1.0 / s.len() as f64).abs() < 1e-15));
    }

    #[test]
    fn tilted_log_ratio_is_linear_in_features() {
        let l = layout();
        let s = response_space(&l);
        let signs = [1.0, -1.0, 1.0];
        let p = tilted_distribution(&l, &s, &signs, 2.0);
        let u = |y: &TokenSeq| l.response_features(y).iter().zip(&signs).map(|(f, s)| f * s).sum::<f64>();
        for (i, j) in [(0, 5), (7, 100), (3, 300)] {
            assert!(((p[i] / p[j]).ln() - 2.0 * (u(&s[i]) - u(&s[j]))).abs() < 1e-10);
        }
    }

    #[test]
    fn pretraining_learns_the_descriptor_language() {
        let l = layout();
        let cfg = PretrainConfig { steps: 600, ..PretrainConfig::default() };
        let g: Policy<f64> = pretrain_generator(&l, 2, 80, default_reference_spec(), Role::GenerationReference, &cfg).unwrap();
        assert!(g.is_frozen());
        // A response dominated by class 0 should gain probability under "class 0 up".
        let x = TokenSeq::new(vec![l.neutral_tokens()[0]]);
        let y = TokenSeq::new(l.class_tokens(0));
        let up = TokenSeq::new(vec![l.descriptor(0, true)]);
        let down = TokenSeq::new(vec![l.descriptor(0, false)]);
        let lp_up = g.log_prob(&TokenSeq::compose(&up, &x), &y).unwrap();
        let lp_down = g.log_prob(&TokenSeq::compose(&down, &x), &y).unwrap();
        assert!(lp_up > lp_down + 1.0, "{lp_up} vs {lp_down}");
    }
}
