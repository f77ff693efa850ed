//! Synthetic personalization benchmark.
//!
//! Token layout for a world with `K` features and vocabulary size `V`:
//!
//! | ids                              | meaning                                     |
//! |----------------------------------|---------------------------------------------|
//! | `0`                              | end of sequence                             |
//! | `1`                              | separator                                   |
//! | `2 + 2k`, `3 + 2k` (`k < K`)     | descriptor "feature k up" / "feature k down" |
//! | next `(K-1) * tokens_per_class`  | response tokens of class `0..K-1`           |
//! | the rest                         | neutral tokens (prompts, filler)            |
//!
//! A response's feature vector holds the fraction of its tokens in each class
//! followed by its length divided by the maximum response length. Personas are
//! sign patterns scaled by `persona_scale`; labels follow a Bradley–Terry draw
//! on `persona · features`. User signals are the persona written in descriptor
//! tokens, repeated, corrupted with probability `signal_noise`, mixed with
//! distractors and padded to `signal_verbosity` tokens.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PopiError, Result};
use crate::objectives::PreferencePair;
use crate::policy::{TokenSeq, Vocab};
use crate::scalar::sigmoid;
use crate::seed;

pub const WORLD_FORMAT: &str = "popi-world";
pub const WORLD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_users: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub tokens_per_class: usize,
    pub signal_noise: f64,
    pub signal_verbosity: usize,
    pub label_temperature: f64,
    pub persona_scale: f64,
    pub pairs_per_user: usize,
    pub heldout_pairs_per_user: usize,
    pub prompt_max_len: usize,
    pub response_max_len: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_users: 64,
            feature_dim: 3,
            vocab_size: 14,
            tokens_per_class: 2,
            signal_noise: 0.2,
            signal_verbosity: 64,
            label_temperature: 1.0,
            persona_scale: 4.0,
            pairs_per_user: 4,
            heldout_pairs_per_user: 8,
            prompt_max_len: 2,
            response_max_len: 4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::new(self.vocab_size, self.feature_dim, self.tokens_per_class, self.response_max_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        if self.num_users == 0 {
            return Err(invalid("num_users must be positive"));
        }
        if !(0.0..=1.0).contains(&self.signal_noise) {
            return Err(invalid("signal_noise must lie in [0, 1]"));
        }
        if !(self.label_temperature > 0.0) || !self.label_temperature.is_finite() {
            return Err(invalid("label_temperature must be positive"));
        }
        if !(self.persona_scale > 0.0) || !self.persona_scale.is_finite() {
            return Err(invalid("persona_scale must be positive"));
        }
        if self.pairs_per_user == 0 || self.heldout_pairs_per_user == 0 {
            return Err(invalid("pairs_per_user and heldout_pairs_per_user must be positive"));
        }
        if self.prompt_max_len == 0 {
            return Err(invalid("prompt_max_len must be positive"));
        }
        Ok(())
    }

    /// Length of every rendered signal sequence.
    pub fn signal_len(&self) -> usize {
        let natural = persona_copies(self.signal_verbosity, self.feature_dim) * self.feature_dim;
        natural.max(self.signal_verbosity)
    }
}

fn persona_copies(verbosity: usize, k: usize) -> usize {
    1 + verbosity / (4 * k)
}

/// Assignment of token ids to roles; see the module docs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub vocab: Vocab,
    pub feature_dim: usize,
    pub tokens_per_class: usize,
    pub response_max_len: usize,
}

impl TokenLayout {
    pub fn new(vocab_size: usize, feature_dim: usize, tokens_per_class: usize, response_max_len: usize) -> Result<Self> {
        if feature_dim < 2 {
            return Err(invalid("feature_dim must be >= 2 (class features plus length)"));
        }
        if tokens_per_class == 0 || response_max_len == 0 {
            return Err(invalid("tokens_per_class and response_max_len must be positive"));
        }
        let min = 2 + 2 * feature_dim + (feature_dim - 1) * tokens_per_class + 1;
        if vocab_size < min {
            return Err(invalid(format!(
                "vocab_size {vocab_size} too small for feature_dim {feature_dim}: need >= {min}"
            )));
        }
        Ok(Self { vocab: Vocab::new(vocab_size)?, feature_dim, tokens_per_class, response_max_len })
    }

    pub fn descriptor(&self, feature: usize, positive: bool) -> u32 {
        (2 + 2 * feature + usize::from(!positive)) as u32
    }

    /// `(feature, positive)` if `token` is a descriptor.
    pub fn parse_descriptor(&self, token: u32) -> Option<(usize, bool)> {
        let t = token as usize;
        (2..2 + 2 * self.feature_dim).contains(&t).then(|| ((t - 2) / 2, (t - 2) % 2 == 0))
    }

    fn class_start(&self) -> usize {
        2 + 2 * self.feature_dim
    }

    fn neutral_start(&self) -> usize {
        self.class_start() + (self.feature_dim - 1) * self.tokens_per_class
    }

    pub fn class_of(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        (self.class_start()..self.neutral_start())
            .contains(&t)
            .then(|| (t - self.class_start()) / self.tokens_per_class)
    }

    pub fn class_tokens(&self, class: usize) -> Vec<u32> {
        let s = self.class_start() + class * self.tokens_per_class;
        (s..s + self.tokens_per_class).map(|t| t as u32).collect()
    }

    pub fn neutral_tokens(&self) -> Vec<u32> {
        (self.neutral_start()..self.vocab.size()).map(|t| t as u32).collect()
    }

    /// Class and neutral tokens: everything a response or distractor is drawn from.
    pub fn content_tokens(&self) -> Vec<u32> {
        (self.class_start()..self.vocab.size()).map(|t| t as u32).collect()
    }

    pub fn descriptor_tokens(&self) -> Vec<u32> {
        (2..self.class_start()).map(|t| t as u32).collect()
    }

    /// Fractions of class tokens followed by a normalized length feature.
    pub fn response_features(&self, seq: &TokenSeq) -> Vec<f64> {
        let mut f = vec![0.0; self.feature_dim];
        if seq.is_empty() {
            return f;
        }
        for &t in seq.tokens() {
            if let Some(c) = self.class_of(t) {
                f[c] += 1.0;
            }
        }
        let n = seq.len() as f64;
        for x in f.iter_mut().take(self.feature_dim - 1) {
            *x /= n;
        }
        f[self.feature_dim - 1] = n / self.response_max_len as f64;
        f
    }
}

/// Hidden ground-truth preference weights. Only evaluation code reads these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub id: usize,
    pub weights: Vec<f64>,
}

/// `persona · features(response)`.
pub fn oracle_utility(layout: &TokenLayout, persona: &Persona, response: &TokenSeq) -> f64 {
    persona.weights.iter().zip(layout.response_features(response)).map(|(w, f)| w * f).sum()
}

/// Bradley–Terry probability that `a` is preferred to `b`.
pub fn bt_preference(layout: &TokenLayout, persona: &Persona, a: &TokenSeq, b: &TokenSeq, temperature: f64) -> f64 {
    let du = oracle_utility(layout, persona, a) - oracle_utility(layout, persona, b);
    sigmoid(du / temperature)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: usize,
    persona: Persona,
    pub signals: TokenSeq,
    pub pairs: Vec<PreferencePair>,
    pub heldout_pairs: Vec<PreferencePair>,
}

impl UserRecord {
    pub fn new(id: usize, persona: Persona, signals: TokenSeq, pairs: Vec<PreferencePair>, heldout_pairs: Vec<PreferencePair>) -> Self {
        Self { id, persona, signals, pairs, heldout_pairs }
    }

    /// Ground truth. Evaluation-only: no training entry point calls this.
    pub fn persona(&self) -> &Persona {
        &self.persona
    }

    /// Overwrites the hidden persona with NaNs (used to check training never reads it).
    pub fn poison_persona(&mut self) {
        self.persona.weights.iter_mut().for_each(|w| *w = f64::NAN);
        self.persona.id = usize::MAX;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub layout: TokenLayout,
    pub users: Vec<UserRecord>,
}

impl World {
    pub fn poisoned(&self) -> World {
        let mut w = self.clone();
        w.users.iter_mut().for_each(UserRecord::poison_persona);
        w
    }
}

fn sample_seq(rng: &mut seed::Rng, pool: &[u32], min_len: usize, max_len: usize) -> TokenSeq {
    let len = rng.gen_range(min_len..=max_len);
    TokenSeq::new((0..len).map(|_| *pool.choose(rng).unwrap()).collect())
}

fn sample_pair(cfg: &WorldConfig, layout: &TokenLayout, persona: &Persona, rng: &mut seed::Rng) -> PreferencePair {
    let prompt = sample_seq(rng, &layout.neutral_tokens(), 1, cfg.prompt_max_len);
    let content = layout.content_tokens();
    let (a, b) = loop {
        let a = sample_seq(rng, &content, 1, cfg.response_max_len);
        let b = sample_seq(rng, &content, 1, cfg.response_max_len);
        if layout.response_features(&a) != layout.response_features(&b) {
            break (a, b);
        }
    };
    let p = bt_preference(layout, persona, &a, &b, cfg.label_temperature);
    let u: f64 = rng.gen();
    if u < p {
        PreferencePair { prompt, chosen: a, rejected: b }
    } else {
        PreferencePair { prompt, chosen: b, rejected: a }
    }
}

/// Renders a persona as a noisy, verbose signal sequence.
pub fn render_signals(cfg: &WorldConfig, layout: &TokenLayout, persona: &Persona, rng: &mut seed::Rng) -> TokenSeq {
    let k = cfg.feature_dim;
    let descriptors = layout.descriptor_tokens();
    let copies = persona_copies(cfg.signal_verbosity, k);
    let mut tokens = Vec::with_capacity(cfg.signal_len());
    for _ in 0..copies {
        for (f, &w) in persona.weights.iter().enumerate() {
            let noisy = cfg.signal_noise > 0.0 && rng.gen::<f64>() < cfg.signal_noise;
            tokens.push(if noisy { *descriptors.choose(rng).unwrap() } else { layout.descriptor(f, w >= 0.0) });
        }
    }
    let n_persona = tokens.len();
    let n_distractors = cfg.signal_verbosity.saturating_sub(n_persona) / 2;
    let content = layout.content_tokens();
    tokens.extend((0..n_distractors).map(|_| *content.choose(rng).unwrap()));
    tokens.shuffle(rng);
    let pad = layout.neutral_tokens()[0];
    tokens.resize(tokens.len().max(cfg.signal_verbosity), pad);
    TokenSeq::new(tokens)
}

/// Majority vote over descriptor tokens; inverse of [`render_signals`] without noise.
pub fn decode_signals(layout: &TokenLayout, signals: &TokenSeq, persona_scale: f64) -> Vec<f64> {
    let mut votes = vec![0i64; layout.feature_dim];
    for &t in signals.tokens() {
        if let Some((f, pos)) = layout.parse_descriptor(t) {
            votes[f] += if pos { 1 } else { -1 };
        }
    }
    votes.into_iter().map(|v| if v >= 0 { persona_scale } else { -persona_scale }).collect()
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let users = (0..cfg.num_users)
        .map(|i| {
            let mut rng = seed::rng(seed::derive(cfg.seed, &[i as u64]));
            let weights = (0..cfg.feature_dim)
                .map(|_| if rng.gen::<bool>() { cfg.persona_scale } else { -cfg.persona_scale })
                .collect();
            let persona = Persona { id: i, weights };
            let signals = render_signals(cfg, &layout, &persona, &mut rng);
            let pairs = (0..cfg.pairs_per_user).map(|_| sample_pair(cfg, &layout, &persona, &mut rng)).collect();
            let heldout = (0..cfg.heldout_pairs_per_user).map(|_| sample_pair(cfg, &layout, &persona, &mut rng)).collect();
            UserRecord::new(i, persona, signals, pairs, heldout)
        })
        .collect();
    Ok(World { config: cfg.clone(), layout, users })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldHeader {
    format: String,
    version: u32,
    config_hash: String,
    config: WorldConfig,
}

/// Writes one header line followed by one JSON record per user.
pub fn write_world<W: Write>(world: &World, config_hash: &str, mut out: W) -> Result<()> {
    let header = WorldHeader {
        format: WORLD_FORMAT.into(),
        version: WORLD_VERSION,
        config_hash: config_hash.into(),
        config: world.config.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for u in &world.users {
        serde_json::to_writer(&mut out, u)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a world file; returns the world and the config hash recorded in its header.
pub fn read_world<R: BufRead>(input: R) -> Result<(World, String)> {
    let mut lines = input.lines();
    let header_line = lines.next().ok_or_else(|| invalid("empty world file"))??;
    let header: WorldHeader = serde_json::from_str(&header_line)
        .map_err(|e| invalid(format!("world header (line 1): {e}")))?;
    if header.format != WORLD_FORMAT || header.version != WORLD_VERSION {
        return Err(invalid(format!("unsupported world format {} v{}", header.format, header.version)));
    }
    let layout = header.config.layout()?;
    let mut users = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let u: UserRecord =
            serde_json::from_str(&line).map_err(|e| invalid(format!("world record (line {}): {e}", n + 2)))?;
        users.push(u);
    }
    if users.len() != header.config.num_users {
        return Err(PopiError::InvalidInput(format!(
            "header declares {} users, file holds {}",
            header.config.num_users,
            users.len()
        )));
    }
    Ok((World { config: header.config, layout, users }, header.config_hash))
}

pub fn save_world(world: &World, config_hash: &str, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_world(world, config_hash, f)
}

pub fn load_world(path: &Path) -> Result<(World, String)> {
    read_world(std::io::BufReader::new(std::fs::File::open(path)?))
}
