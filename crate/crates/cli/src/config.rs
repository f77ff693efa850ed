//! Experiment configuration: one TOML file with a section per module.

use std::path::Path;

use popi_core::basemodel::BaseConfig;
use popi_core::eval::EvalConfig;
use popi_core::grpo::GrpoConfig;
use popi_core::objectives::{ObjectiveConfig, Variant};
use popi_core::stage2::Stage2Config;
use popi_core::synthworld::WorldConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub variant: Variant,
    pub beta: f64,
    /// Overrides the coupled KL weight when set.
    pub alpha: Option<f64>,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self { variant: Variant::Dpo, beta: 0.1, alpha: None }
    }
}

/// Settings for the exhaustive bound check. Instances are tiny worlds with
/// two features and eight tokens so every space is enumerable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub instances: usize,
    pub num_users: usize,
    pub param_scale: f64,
    pub trajectory_steps: usize,
    pub trajectory_lr: f64,
    pub seed: u64,
}

impl Default for BoundSection {
    fn default() -> Self {
        Self { instances: 200, num_users: 6, param_scale: 6.0, trajectory_steps: 100, trajectory_lr: 10.0, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub objective: ObjectiveSection,
    pub grpo: GrpoConfig,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub base: BaseConfig,
    pub bound: BoundSection,
}

/// First eight bytes of the SHA-256 of the resolved configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfigHash(pub u64);

impl ConfigHash {
    pub fn hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

impl std::fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.hex())
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn shipped_default() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG).expect("shipped default config parses")
    }

    /// Sets every module seed to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.grpo.seed = seed;
        self.stage2.seed = seed;
        self.eval.seed = seed;
        self.bound.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: popi_core::PopiError| CliError::Config(e.to_string());
        self.world.validate().map_err(wrap)?;
        self.grpo.validate().map_err(wrap)?;
        self.stage2.validate().map_err(wrap)?;
        self.objective().map_err(|e| CliError::Config(e.to_string()))?;
        if self.world.signal_len() + 1 + self.world.prompt_max_len > self.base.context_window {
            return Err(CliError::Config(format!(
                "base.context_window {} cannot hold {} signal tokens plus a prompt",
                self.base.context_window,
                self.world.signal_len()
            )));
        }
        if self.bound.num_users == 0 || !(self.bound.param_scale >= 0.0) || !(self.bound.trajectory_lr > 0.0) {
            return Err(CliError::Config("bound section: num_users > 0, param_scale >= 0, trajectory_lr > 0".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<ObjectiveConfig<f64>> {
        let o = ObjectiveConfig::new(self.objective.variant, self.objective.beta)?;
        Ok(match self.objective.alpha {
            Some(a) => o.with_alpha(a)?,
            None => o,
        })
    }

    pub fn hash(&self) -> ConfigHash {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        ConfigHash(u64::from_be_bytes(digest[..8].try_into().unwrap()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
