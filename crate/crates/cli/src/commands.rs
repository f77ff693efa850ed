//! The experiment flow: world → base models → stage 1 → stage 2 → evaluation,
//! plus the exhaustive bound check. Each step has an in-memory form used by
//! the tests and a command form that reads and writes artifacts under an
//! output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use popi_core::basemodel::{build_base_models, BaseModels};
use popi_core::eval::{run_matrix, EvalPolicies, MetricsTable, Mode};
use popi_core::grpo::{train_stage1, HistoryRecord};
use popi_core::infobound::{descend_inference_calibrated, exact_info_report, InfoInstance, InfoReport};
use popi_core::pipeline::Conditioning;
use popi_core::policy::{load_checkpoint, save_checkpoint, Arch, Policy, Role, Vocab, DEFAULT_ENUMERATION_CAP};
use popi_core::seed;
use popi_core::stage2::{train_stage2, train_stage2_with};
use popi_core::PopiError;
use popi_core::synthworld::{generate_world, load_world, save_world, World, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigHash, ExperimentConfig};
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Both,
}

/// Trained inference policy and its history.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Output {
    pub base: BaseModels<f64>,
    pub inf: Policy<f64>,
    pub history: Vec<HistoryRecord>,
}

/// The three stage-2 generators.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    pub full: Policy<f64>,
    pub inference_aligned: Policy<f64>,
    pub raw_aligned: Policy<f64>,
    pub histories: [Vec<HistoryRecord>; 3],
}

pub const STAGE2_NAMES: [&str; 3] = ["gen_full", "gen_inference_aligned", "gen_raw_aligned"];

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    Ok(generate_world(&cfg.world)?)
}

pub fn build_base(cfg: &ExperimentConfig, world: &World) -> Result<BaseModels<f64>> {
    Ok(build_base_models(&world.layout, cfg.world.prompt_max_len, cfg.world.signal_len(), &cfg.base, cfg.world.seed)?)
}

/// Stage 1 from the reference summarizer. Reads only signals and pairs.
pub fn run_stage1(cfg: &ExperimentConfig, world: &World, base: BaseModels<f64>) -> Result<Stage1Output> {
    let init = base.inf_ref.cloned_as(Role::Inference);
    let (inf, history) = train_stage1(&init, &base.inf_ref, &base.gen_ref, &world.users, &cfg.objective()?, &cfg.grpo)?;
    Ok(Stage1Output { base, inf: inf.frozen(), history })
}

/// Stage 2 for POPI-Full plus the two aligned baselines.
pub fn run_stage2(cfg: &ExperimentConfig, world: &World, base: &BaseModels<f64>, inf: &Policy<f64>) -> Result<Stage2Output> {
    let obj = cfg.objective()?;
    let init = base.gen_ref.cloned_as(Role::Generation);
    let (full, h0) = train_stage2(&init, &base.gen_ref, inf, &world.users, &obj, &cfg.stage2)?;
    let (ia, h1) = train_stage2(&init, &base.gen_ref, &base.inf_ref, &world.users, &obj, &cfg.stage2)?;
    let (ra, h2) = train_stage2_with(&init, &base.gen_ref, Conditioning::RawSignals, &world.users, &obj, &cfg.stage2)?;
    Ok(Stage2Output { full: full.frozen(), inference_aligned: ia.frozen(), raw_aligned: ra.frozen(), histories: [h0, h1, h2] })
}

pub fn run_eval(cfg: &ExperimentConfig, world: &World, s1: &Stage1Output, s2: &Stage2Output) -> Result<MetricsTable> {
    let policies = EvalPolicies {
        gen_ref: &s1.base.gen_ref,
        inf_ref: Some(&s1.base.inf_ref),
        inf: Some(&s1.inf),
        gen_full: Some(&s2.full),
        gen_inference_aligned: Some(&s2.inference_aligned),
        gen_raw_aligned: Some(&s2.raw_aligned),
        zoo: &s1.base.zoo,
    };
    Ok(run_matrix(&world.users, &world.layout, &policies, &Mode::ALL, &cfg.eval)?)
}

/// Everything from one configuration, in memory.
pub struct PipelineOutput {
    pub world: World,
    pub stage1: Stage1Output,
    pub stage2: Stage2Output,
    pub table: MetricsTable,
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    let world = build_world(cfg)?;
    let base = build_base(cfg, &world)?;
    let stage1 = run_stage1(cfg, &world, base)?;
    let stage2 = run_stage2(cfg, &world, &stage1.base, &stage1.inf)?;
    let table = run_eval(cfg, &world, &stage1, &stage2)?;
    Ok(PipelineOutput { world, stage1, stage2, table })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub report: InfoReport,
    pub instances: usize,
    pub max_identity_residual: f64,
    pub min_bound_gap: f64,
    pub max_gap_kl_difference: f64,
    /// `I(ℓ; Z | Q)` along calibrated descent of the first instance.
    pub trajectory: Vec<f64>,
    pub max_information_drop: f64,
}

/// Largest tolerated step-to-step decrease of the mutual information.
pub const TRAJECTORY_TOL: f64 = 1e-10;

fn bound_world(cfg: &ExperimentConfig, i: usize) -> Result<World> {
    let w = &cfg.world;
    Ok(generate_world(&WorldConfig {
        num_users: cfg.bound.num_users,
        feature_dim: 2,
        vocab_size: 8,
        tokens_per_class: 1,
        signal_noise: w.signal_noise,
        signal_verbosity: 4,
        label_temperature: w.label_temperature,
        persona_scale: w.persona_scale,
        pairs_per_user: 2,
        heldout_pairs_per_user: 1,
        prompt_max_len: 1,
        response_max_len: 2,
        seed: seed::derive(cfg.bound.seed, &[i as u64]),
    })?)
}

fn bound_policy(cfg: &ExperimentConfig, i: usize, role: Role) -> Result<Policy<f64>> {
    let arch = Arch { embed_dim: 4, hidden_dim: 5, context_window: 12, max_len: 2 };
    let mut p = Policy::new(Vocab::new(8)?, arch, role, seed::derive(cfg.bound.seed, &[i as u64, role as u64]))?;
    let scaled: Vec<f64> = p.params().iter().map(|x| x * cfg.bound.param_scale).collect();
    p.set_params(scaled)?;
    Ok(p)
}

/// Exact reports on `bound.instances` random tiny instances plus the
/// information trajectory. `loss_offset` corrupts every reported loss before
/// checking (a probe for the checker itself).
pub fn run_bound(cfg: &ExperimentConfig, loss_offset: f64) -> Result<BoundSummary> {
    let beta = cfg.objective.beta;
    let mut first = None;
    let (mut max_res, mut min_gap, mut max_diff) = (0.0f64, f64::INFINITY, 0.0f64);
    for i in 0..cfg.bound.instances.max(1) {
        let world = bound_world(cfg, i)?;
        let inst = InfoInstance::new(&world.layout, &world.users, world.config.label_temperature, beta, DEFAULT_ENUMERATION_CAP)?;
        let gen = bound_policy(cfg, i, Role::Generation)?;
        let gen_ref = bound_policy(cfg, i, Role::GenerationReference)?;
        let inf = bound_policy(cfg, i, Role::Inference)?;
        let r = exact_info_report(&gen, &gen_ref, &inf, &inst)?.with_loss_offset(loss_offset);
        r.check().map_err(|e| match e {
            PopiError::Invariant(m) => CliError::Invariant(format!("instance {i}: {m}")),
            other => other.into(),
        })?;
        max_res = max_res.max(r.identity_residual().abs());
        min_gap = min_gap.min(r.bound_gap);
        max_diff = max_diff.max((r.bound_gap - r.kl_term).abs());
        first.get_or_insert(r);
    }
    let world = bound_world(cfg, 0)?;
    let inst = InfoInstance::new(&world.layout, &world.users, world.config.label_temperature, beta, DEFAULT_ENUMERATION_CAP)?;
    let inf = bound_policy(cfg, 0, Role::Inference)?;
    let (_, trace) = descend_inference_calibrated(&inf, &inst, cfg.bound.trajectory_steps, cfg.bound.trajectory_lr)?;
    let trajectory: Vec<f64> = trace.iter().map(|r| r.mutual_info_i).collect();
    let max_drop = trajectory.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    if max_drop > TRAJECTORY_TOL {
        return Err(CliError::Invariant(format!("mutual information fell by {max_drop} during descent")));
    }
    Ok(BoundSummary {
        report: first.expect("at least one instance"),
        instances: cfg.bound.instances.max(1),
        max_identity_residual: max_res,
        min_bound_gap: min_gap,
        max_gap_kl_difference: max_diff,
        trajectory,
        max_information_drop: max_drop,
    })
}

/// Artifact layout under the output directory.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub hash: ConfigHash,
    pub out: PathBuf,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Self {
        let hash = cfg.hash();
        Self { cfg, hash, out: out.into() }
    }

    pub fn world_path(&self) -> PathBuf {
        self.out.join("world.jsonl")
    }

    pub fn base_path(&self, name: &str) -> PathBuf {
        self.out.join("base").join(format!("{name}.ckpt"))
    }

    pub fn inf_path(&self) -> PathBuf {
        self.out.join("stage1").join("inf.ckpt")
    }

    pub fn stage2_path(&self, name: &str) -> PathBuf {
        self.out.join("stage2").join(format!("{name}.ckpt"))
    }

    pub fn history_path(&self, name: &str) -> PathBuf {
        self.out.join("history").join(format!("{name}.jsonl"))
    }

    pub fn metrics_path(&self, ext: &str) -> PathBuf {
        self.out.join(format!("metrics.{ext}"))
    }

    pub fn bound_path(&self) -> PathBuf {
        self.out.join("bound.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.out.join("report.md")
    }

    fn ensure_parent(path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        Ok(())
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        Self::ensure_parent(path)?;
        fs::write(path, bytes).map_err(CliError::io(path))
    }

    fn require(path: &Path, hint: &'static str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::Missing { path: path.to_path_buf(), hint })
        }
    }

    fn save_policy(&self, policy: &Policy<f64>, path: &Path) -> Result<()> {
        Self::ensure_parent(path)?;
        Ok(save_checkpoint(policy, self.hash.0, path)?)
    }

    fn load_policy(&self, path: &Path, hint: &'static str) -> Result<Policy<f64>> {
        Self::require(path, hint)?;
        let (p, header) = load_checkpoint(path, None)?;
        if header.config_hash != self.hash.0 {
            return Err(CliError::Config(format!(
                "{} was written under config {:016x}, current config is {}",
                path.display(),
                header.config_hash,
                self.hash
            )));
        }
        Ok(p)
    }

    fn write_history(&self, name: &str, history: &[HistoryRecord]) -> Result<()> {
        let mut buf = Vec::new();
        for h in history {
            serde_json::to_writer(&mut buf, h)?;
            buf.push(b'\n');
        }
        self.write(&self.history_path(name), &buf)
    }

    pub fn read_history(&self, name: &str) -> Result<Vec<HistoryRecord>> {
        let path = self.history_path(name);
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    pub fn load_world(&self) -> Result<World> {
        let path = self.world_path();
        Self::require(&path, "gen-world")?;
        let (world, hash) = load_world(&path)?;
        if hash != self.hash.hex() {
            return Err(CliError::Config(format!("{} was written under config {hash}, current config is {}", path.display(), self.hash)));
        }
        Ok(world)
    }

    fn load_base(&self) -> Result<BaseModels<f64>> {
        let zoo = (0..self.cfg.base.zoo.len())
            .map(|k| self.load_policy(&self.base_path(&format!("zoo-{k}")), "train --stage 1"))
            .collect::<Result<Vec<_>>>()?;
        Ok(BaseModels {
            gen_ref: self.load_policy(&self.base_path("gen_ref"), "train --stage 1")?,
            inf_ref: self.load_policy(&self.base_path("inf_ref"), "train --stage 1")?,
            zoo,
        })
    }

    pub fn gen_world(&self) -> Result<PathBuf> {
        let world = build_world(&self.cfg)?;
        let path = self.world_path();
        Self::ensure_parent(&path)?;
        save_world(&world, &self.hash.hex(), &path)?;
        Ok(path)
    }

    fn stage1(&self) -> Result<()> {
        let world = self.load_world()?;
        let base = build_base(&self.cfg, &world)?;
        self.save_policy(&base.gen_ref, &self.base_path("gen_ref"))?;
        self.save_policy(&base.inf_ref, &self.base_path("inf_ref"))?;
        for (k, z) in base.zoo.iter().enumerate() {
            self.save_policy(z, &self.base_path(&format!("zoo-{k}")))?;
        }
        let out = run_stage1(&self.cfg, &world, base)?;
        self.save_policy(&out.inf, &self.inf_path())?;
        self.write_history("stage1", &out.history)
    }

    fn stage2(&self) -> Result<()> {
        let world = self.load_world()?;
        let base = self.load_base()?;
        let inf = self.load_policy(&self.inf_path(), "train --stage 1")?;
        let out = run_stage2(&self.cfg, &world, &base, &inf)?;
        for ((name, p), h) in STAGE2_NAMES.iter().zip([&out.full, &out.inference_aligned, &out.raw_aligned]).zip(&out.histories) {
            self.save_policy(p, &self.stage2_path(name))?;
            self.write_history(&format!("stage2-{name}"), h)?;
        }
        Ok(())
    }

    pub fn train(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::One => self.stage1(),
            Stage::Two => self.stage2(),
            Stage::Both => {
                self.stage1()?;
                self.stage2()
            }
        }
    }

    pub fn eval(&self) -> Result<MetricsTable> {
        let world = self.load_world()?;
        let base = self.load_base()?;
        let inf = self.load_policy(&self.inf_path(), "train --stage 1")?;
        let hint = "train --stage 2";
        let s2 = Stage2Output {
            full: self.load_policy(&self.stage2_path(STAGE2_NAMES[0]), hint)?,
            inference_aligned: self.load_policy(&self.stage2_path(STAGE2_NAMES[1]), hint)?,
            raw_aligned: self.load_policy(&self.stage2_path(STAGE2_NAMES[2]), hint)?,
            histories: Default::default(),
        };
        let s1 = Stage1Output { base, inf, history: Vec::new() };
        let table = run_eval(&self.cfg, &world, &s1, &s2)?;
        self.write(&self.metrics_path("jsonl"), table.to_jsonl()?.as_bytes())?;
        self.write(&self.metrics_path("txt"), table.to_text().as_bytes())?;
        Ok(table)
    }

    pub fn verify_bound(&self, loss_offset: f64) -> Result<BoundSummary> {
        let summary = run_bound(&self.cfg, loss_offset)?;
        self.write(&self.bound_path(), &serde_json::to_vec_pretty(&summary)?)?;
        Ok(summary)
    }

    /// Markdown summary of whatever artifacts exist.
    pub fn report(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "# Run report\n\nconfig hash `{}`\n", self.hash);
        let metrics = self.metrics_path("txt");
        match fs::read_to_string(&metrics) {
            Ok(t) => {
                let _ = writeln!(out, "## Metrics\n\n```\n{t}```\n");
            }
            Err(_) => {
                let _ = writeln!(out, "## Metrics\n\nnot evaluated yet (`popi eval`)\n");
            }
        }
        let mut histories = vec!["stage1".to_string()];
        histories.extend(STAGE2_NAMES.iter().map(|n| format!("stage2-{n}")));
        let _ = writeln!(out, "## Training\n\n| run | steps | first loss | last loss | first len | last len |\n|---|---|---|---|---|---|");
        for name in histories {
            if let Ok(h) = self.read_history(&name) {
                if let (Some(a), Some(b)) = (h.first(), h.last()) {
                    let _ = writeln!(
                        out,
                        "| {name} | {} | {:.4} | {:.4} | {:.2} | {:.2} |",
                        h.len(),
                        a.loss,
                        b.loss,
                        a.mean_summary_len,
                        b.mean_summary_len
                    );
                }
            }
        }
        if let Ok(text) = fs::read_to_string(self.bound_path()) {
            let b: BoundSummary = serde_json::from_str(&text)?;
            let _ = writeln!(
                out,
                "\n## Bound\n\n{} instances, max identity residual {:.2e}, min gap {:.2e}, I: {:.6} → {:.6}\n\n```\n{}```",
                b.instances,
                b.max_identity_residual,
                b.min_bound_gap,
                b.trajectory.first().copied().unwrap_or(0.0),
                b.trajectory.last().copied().unwrap_or(0.0),
                b.report.to_record()
            );
        }
        self.write(&self.report_path(), out.as_bytes())?;
        Ok(out)
    }
}
