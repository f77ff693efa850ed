//! Held-out metrics: reward accuracy against a base model, oracle win rate and
//! average context overhead, plus the seven-mode comparison matrix and the
//! plug-and-play transfer table.

use serde::{Deserialize, Serialize};

use crate::error::{PopiError, Result};
use crate::objectives::PreferencePair;
use crate::pipeline::{Conditioning, SummaryCache};
use crate::policy::{Policy, SequenceModel, TokenSeq};
use crate::scalar::Scalar;
use crate::seed;
use crate::synthworld::{oracle_utility, TokenLayout, UserRecord};

/// Margins closer than this count as a tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    BaseModel,
    RawPrompting,
    InferencePrompting,
    PopiPlugAndPlay,
    RawAligned,
    InferenceAligned,
    PopiFull,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::BaseModel,
        Mode::RawPrompting,
        Mode::InferencePrompting,
        Mode::PopiPlugAndPlay,
        Mode::RawAligned,
        Mode::InferenceAligned,
        Mode::PopiFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaseModel => "Base-Model",
            Mode::RawPrompting => "Raw-Prompting",
            Mode::InferencePrompting => "Inference-Prompting",
            Mode::PopiPlugAndPlay => "POPI-Plug-and-Play",
            Mode::RawAligned => "Raw-Aligned",
            Mode::InferenceAligned => "Inference-Aligned",
            Mode::PopiFull => "POPI-Full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub reward_accuracy: f64,
    pub win_rate: f64,
    pub context_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: String,
    pub generator: String,
    pub reward_accuracy: f64,
    pub win_rate: f64,
    pub avg_context_len: f64,
    pub per_user: Vec<UserMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub win_samples_per_prompt: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, win_samples_per_prompt: 1 }
    }
}

/// 1 if the method's margin beats the base margin, 0.5 on a tie, else 0.
pub fn pair_score(method_margin: f64, base_margin: f64) -> f64 {
    if (method_margin - base_margin).abs() <= TIE_TOLERANCE {
        0.5
    } else if method_margin > base_margin {
        1.0
    } else {
        0.0
    }
}

fn margin<T: Scalar, M: SequenceModel<T> + ?Sized>(model: &M, prefix: &TokenSeq, pair: &PreferencePair) -> Result<f64> {
    let ctx = TokenSeq::compose(prefix, &pair.prompt);
    Ok((model.log_prob(&ctx, &pair.chosen)? - model.log_prob(&ctx, &pair.rejected)?).as_f64())
}

fn utility_score(layout: &TokenLayout, user: &UserRecord, a: &TokenSeq, b: &TokenSeq) -> f64 {
    let ua = oracle_utility(layout, user.persona(), a);
    let ub = oracle_utility(layout, user.persona(), b);
    if ua == ub {
        0.5
    } else if ua > ub {
        1.0
    } else {
        0.0
    }
}

/// Seed used for the summaries of one evaluation pass.
pub fn summary_pass_seed(seed_value: u64) -> u64 {
    seed::derive_named(seed_value, "eval-summaries")
}

/// Scores one method against a base on every user's held-out pairs. Each
/// user's prefix is produced once and shared by both metrics.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar, M: SequenceModel<T> + ?Sized, B: SequenceModel<T> + ?Sized>(
    method_name: &str,
    generator_name: &str,
    method: &M,
    base: &B,
    conditioning: Conditioning<'_, T>,
    users: &[UserRecord],
    layout: &TokenLayout,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    if users.is_empty() {
        return Err(crate::error::invalid("empty user list"));
    }
    let cache = SummaryCache::new(conditioning, summary_pass_seed(cfg.seed));
    let empty = TokenSeq::empty();
    let mut per_user = Vec::with_capacity(users.len());
    let (mut acc_sum, mut win_sum, mut n_pairs, mut n_games, mut len_sum) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for (i, user) in users.iter().enumerate() {
        if user.heldout_pairs.is_empty() {
            return Err(crate::error::invalid(format!("user {i} has no held-out pairs")));
        }
        let prefix = cache.prefix(i, user)?;
        let (mut ua, mut uw, mut games) = (0.0, 0.0, 0usize);
        for (j, pair) in user.heldout_pairs.iter().enumerate() {
            ua += pair_score(margin(method, &prefix, pair)?, margin(base, &empty, pair)?);
            for s in 0..cfg.win_samples_per_prompt {
                let sd = seed::derive(cfg.seed, &[i as u64, j as u64, s as u64, 0x7769]);
                let ym = method.sample(&TokenSeq::compose(&prefix, &pair.prompt), sd, method.max_len())?;
                let yb = base.sample(&TokenSeq::compose(&empty, &pair.prompt), sd, base.max_len())?;
                uw += utility_score(layout, user, &ym, &yb);
                games += 1;
            }
        }
        acc_sum += ua;
        win_sum += uw;
        n_pairs += user.heldout_pairs.len();
        n_games += games;
        len_sum += prefix.len();
        per_user.push(UserMetrics {
            user: i,
            reward_accuracy: ua / user.heldout_pairs.len() as f64,
            win_rate: if games == 0 { 0.5 } else { uw / games as f64 },
            context_len: prefix.len(),
        });
    }
    Ok(Metrics {
        method: method_name.to_string(),
        generator: generator_name.to_string(),
        reward_accuracy: acc_sum / n_pairs as f64,
        win_rate: if n_games == 0 { 0.5 } else { win_sum / n_games as f64 },
        avg_context_len: len_sum as f64 / users.len() as f64,
        per_user,
    })
}

pub fn reward_accuracy<T: Scalar, M: SequenceModel<T> + ?Sized, B: SequenceModel<T> + ?Sized>(
    method: &M,
    base: &B,
    conditioning: Conditioning<'_, T>,
    users: &[UserRecord],
    seed_value: u64,
) -> Result<f64> {
    let cache = SummaryCache::new(conditioning, summary_pass_seed(seed_value));
    let empty = TokenSeq::empty();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, user) in users.iter().enumerate() {
        if user.heldout_pairs.is_empty() {
            return Err(crate::error::invalid(format!("user {i} has no held-out pairs")));
        }
        let prefix = cache.prefix(i, user)?;
        for pair in &user.heldout_pairs {
            sum += pair_score(margin(method, &prefix, pair)?, margin(base, &empty, pair)?);
            n += 1;
        }
    }
    if n == 0 {
        return Err(crate::error::invalid("no held-out pairs"));
    }
    Ok(sum / n as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn win_rate_oracle<T: Scalar, M: SequenceModel<T> + ?Sized, B: SequenceModel<T> + ?Sized>(
    method: &M,
    base: &B,
    conditioning: Conditioning<'_, T>,
    users: &[UserRecord],
    layout: &TokenLayout,
    samples_per_prompt: usize,
    seed_value: u64,
) -> Result<f64> {
    let cfg = EvalConfig { seed: seed_value, win_samples_per_prompt: samples_per_prompt.max(1) };
    Ok(evaluate("", "", method, base, conditioning, users, layout, &cfg)?.win_rate)
}

/// Mean number of tokens placed in front of the prompt.
pub fn avg_context_len<T: Scalar>(conditioning: Conditioning<'_, T>, users: &[UserRecord], seed_value: u64) -> Result<f64> {
    if users.is_empty() {
        return Err(crate::error::invalid("empty user list"));
    }
    let cache = SummaryCache::new(conditioning, summary_pass_seed(seed_value));
    let mut total = 0usize;
    for (i, u) in users.iter().enumerate() {
        total += cache.prefix(i, u)?.len();
    }
    Ok(total as f64 / users.len() as f64)
}

/// Trained and base policies for the comparison matrix. Missing entries make
/// the modes that need them fail with a configuration error.
#[derive(Clone, Copy)]
pub struct EvalPolicies<'a, T> {
    pub gen_ref: &'a Policy<T>,
    pub inf_ref: Option<&'a Policy<T>>,
    pub inf: Option<&'a Policy<T>>,
    pub gen_full: Option<&'a Policy<T>>,
    pub gen_inference_aligned: Option<&'a Policy<T>>,
    pub gen_raw_aligned: Option<&'a Policy<T>>,
    pub zoo: &'a [Policy<T>],
}

fn need<'a, T>(p: Option<&'a Policy<T>>, what: &str, mode: Mode) -> Result<&'a Policy<T>> {
    p.ok_or_else(|| PopiError::Config(format!("{} needs the {what} checkpoint", mode.name())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<Metrics>,
    /// Plug-and-play rows for each frozen zoo generator, each paired with its
    /// Inference-Prompting row.
    pub transfer: Vec<Metrics>,
}

/// Evaluates `modes` (normally [`Mode::ALL`]) and the zoo transfer rows.
pub fn run_matrix<T: Scalar>(
    users: &[UserRecord],
    layout: &TokenLayout,
    policies: &EvalPolicies<'_, T>,
    modes: &[Mode],
    cfg: &EvalConfig,
) -> Result<MetricsTable> {
    let p = policies;
    let gen_ref = p.gen_ref;
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let (method, cond): (&Policy<T>, Conditioning<'_, T>) = match mode {
            Mode::BaseModel => (gen_ref, Conditioning::None),
            Mode::RawPrompting => (gen_ref, Conditioning::RawSignals),
            Mode::InferencePrompting => (gen_ref, Conditioning::summaries(need(p.inf_ref, "reference inference", mode)?)),
            Mode::PopiPlugAndPlay => (gen_ref, Conditioning::summaries(need(p.inf, "trained inference", mode)?)),
            Mode::RawAligned => (need(p.gen_raw_aligned, "raw-aligned generator", mode)?, Conditioning::RawSignals),
            Mode::InferenceAligned => (
                need(p.gen_inference_aligned, "inference-aligned generator", mode)?,
                Conditioning::summaries(need(p.inf_ref, "reference inference", mode)?),
            ),
            Mode::PopiFull => (
                need(p.gen_full, "fine-tuned generator", mode)?,
                Conditioning::summaries(need(p.inf, "trained inference", mode)?),
            ),
        };
        rows.push(evaluate(mode.name(), "gen_ref", method, gen_ref, cond, users, layout, cfg)?);
    }
    let mut transfer = Vec::new();
    for (k, z) in p.zoo.iter().enumerate() {
        if !z.is_frozen() {
            return Err(PopiError::Config(format!("zoo generator {k} is not frozen")));
        }
        let name = format!("zoo-{k}");
        if let Some(inf_ref) = p.inf_ref {
            transfer.push(evaluate(Mode::InferencePrompting.name(), &name, z, z, Conditioning::summaries(inf_ref), users, layout, cfg)?);
        }
        let inf = need(p.inf, "trained inference", Mode::PopiPlugAndPlay)?;
        transfer.push(evaluate(Mode::PopiPlugAndPlay.name(), &name, z, z, Conditioning::summaries(inf), users, layout, cfg)?);
    }
    Ok(MetricsTable { rows, transfer })
}

impl MetricsTable {
    /// One JSON object per row, main rows first.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in self.rows.iter().chain(&self.transfer) {
            let mut v = serde_json::to_value(m)?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove("per_user");
            }
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Aligned plain-text table with `Avg. Len.`, `Acc. (%)` and `Win Rate (%)`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let header = format!("{:<22} {:<10} {:>10} {:>9} {:>13}\n", "Method", "Generator", "Avg. Len.", "Acc. (%)", "Win Rate (%)");
        out.push_str(&header);
        out.push_str(&"-".repeat(header.len() - 1));
        out.push('\n');
        for m in self.rows.iter().chain(&self.transfer) {
            let len = if m.avg_context_len == 0.0 { "–".to_string() } else { format!("{:.2}", m.avg_context_len) };
            out.push_str(&format!(
                "{:<22} {:<10} {:>10} {:>9.2} {:>13.2}\n",
                m.method,
                m.generator,
                len,
                100.0 * m.reward_accuracy,
                100.0 * m.win_rate
            ));
        }
        out
    }

    pub fn row(&self, mode: Mode) -> Option<&Metrics> {
        self.rows.iter().find(|m| m.method == mode.name())
    }

    pub fn transfer_rows(&self, mode: Mode) -> Vec<&Metrics> {
        self.transfer.iter().filter(|m| m.method == mode.name()).collect()
    }
}
