// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML document, dotted overrides, and validation
//! that reports every problem at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capsule::GateConfig;
use crate::dataset::{Oversample, SynthConfig};
use crate::error::{Error, Result};
use crate::healing::{HealConfig, LossWeights};
use crate::model::train::TrainConfig;
use crate::model::{AdapterConfig, ModelConfig, Submodule};
use crate::probe::{AlignMode, ProbeConfig};
use crate::signature::{BootstrapConfig, ControlSource, MineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Every other path is resolved against this one.
    pub root: PathBuf,
    /// Optional JSONL triples replacing the synthetic facts.
    pub triples: Option<PathBuf>,
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub activations: PathBuf,
    pub signatures: PathBuf,
    pub capsules: PathBuf,
    pub heal: PathBuf,
    pub adapters: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("run"),
            triples: None,
            corpus: "corpus".into(),
            checkpoints: "checkpoints".into(),
            activations: "activations".into(),
            signatures: "signatures".into(),
            capsules: "capsules".into(),
            heal: "heal".into(),
            adapters: "adapters".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineSection {
    pub effect_threshold: f64,
    pub max_components: usize,
    pub oversample: Oversample,
    pub bootstrap: BootstrapConfig,
    pub seed: u64,
    pub controls: ControlSource,
}

impl Default for MineSection {
    fn default() -> Self {
        let m = MineConfig::default();
        Self {
            effect_threshold: m.effect_threshold,
            max_components: m.max_components,
            oversample: m.oversample,
            bootstrap: m.bootstrap,
            seed: m.seed,
            controls: ControlSource::default(),
        }
    }
}

impl MineSection {
    pub fn mine_config(&self) -> MineConfig {
        MineConfig {
            effect_threshold: self.effect_threshold,
            max_components: self.max_components,
            oversample: self.oversample,
            bootstrap: self.bootstrap,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapsuleSection {
    pub tau: f64,
    pub k: f64,
    pub alpha_init: f64,
    pub top_k: usize,
    pub submodule: Submodule,
    pub align: AlignMode,
}

impl Default for CapsuleSection {
    fn default() -> Self {
        let g = GateConfig::default();
        Self { tau: g.tau, k: g.k, alpha_init: g.alpha_init, top_k: 3, submodule: Submodule::Down, align: AlignMode::Truncate }
    }
}

impl CapsuleSection {
    pub fn gate(&self) -> GateConfig {
        GateConfig { tau: self.tau, k: self.k, alpha_init: self.alpha_init }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HealSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub anchor_batch: usize,
    pub warmup: usize,
    pub clip: f64,
    pub seed: u64,
    /// Collect-then-train repetitions.
    pub rounds: usize,
    pub fisher_pool: usize,
    pub max_new: usize,
    pub weights: LossWeights,
}

impl Default for HealSection {
    fn default() -> Self {
        let h = HealConfig::default();
        Self {
            steps: h.steps,
            lr: h.lr,
            batch_size: h.batch_size,
            anchor_batch: h.anchor_batch,
            warmup: h.warmup,
            clip: h.clip,
            seed: h.seed,
            rounds: 1,
            fisher_pool: 128,
            max_new: 24,
            weights: h.weights,
        }
    }
}

impl HealSection {
    pub fn heal_config(&self) -> HealConfig {
        HealConfig {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            anchor_batch: self.anchor_batch,
            warmup: self.warmup,
            clip: self.clip,
            seed: self.seed,
            weights: self.weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub epsilon: f64,
    pub max_new: usize,
    pub label: String,
    /// Keep per-prompt rows in the report.
    pub details: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { epsilon: crate::eval::DEFAULT_EPSILON, max_new: 24, label: "full".into(), details: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Subject to erase; the first subject of the corpus when unset.
    pub subject: Option<String>,
    pub workers: usize,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub mine: MineSection,
    pub capsule: CapsuleSection,
    pub adapter: AdapterConfig,
    pub heal: HealSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            subject: None,
            workers: 4,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            mine: MineSection::default(),
            capsule: CapsuleSection::default(),
            adapter: AdapterConfig::default(),
            heal: HealSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies `key=value` overrides and validates. Unknown
    /// keys and semantic violations are reported together.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut errs = Vec::new();
        for o in overrides {
            if let Err(e) = apply_override(&mut table, o) {
                errs.push(e);
            }
        }
        let mut unknown = Vec::new();
        let cfg: RunConfig = match serde_ignored::deserialize(toml::Value::Table(table), |p| {
            unknown.push(p.to_string())
        }) {
            Ok(c) => c,
            Err(e) => {
                errs.push(e.to_string());
                return Err(Error::Config(errs));
            }
        };
        errs.extend(unknown.into_iter().map(|k| format!("unknown key `{k}`")));
        errs.extend(cfg.validate());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("cannot render config: {e}")))
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.mine.seed = seed;
        self.mine.bootstrap.seed = seed;
        self.adapter.seed = seed;
        self.heal.seed = seed;
    }

    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.workers == 0 {
            e.push("workers must be at least 1".into());
        }
        let m = ModelConfig { vocab_size: self.model.vocab_size.max(4), ..self.model.clone() };
        e.extend(m.validate());
        if self.synth.n_subjects < 2 {
            e.push("synth.n_subjects must be at least 2".into());
        }
        if self.synth.n_predicates == 0 {
            e.push("synth.n_predicates must be positive".into());
        }
        if self.train.batch_size == 0 {
            e.push("train.batch_size must be positive".into());
        }
        if !(self.train.lr >= 0.0) {
            e.push("train.lr must be non-negative".into());
        }
        if self.probe.batch_size == 0 {
            e.push("probe.batch_size must be positive".into());
        }
        if self.probe.submodules.is_empty() {
            e.push("probe.submodules must not be empty".into());
        }
        if !self.probe.submodules.contains(&self.capsule.submodule) {
            e.push(format!("capsule.submodule {} is not probed", self.capsule.submodule.name()));
        }
        if let Some(&l) = self.probe.layers.iter().find(|&&l| l >= self.model.n_layers) {
            e.push(format!("probe.layers contains {l}, beyond model.n_layers {}", self.model.n_layers));
        }
        if !(self.mine.effect_threshold > 0.0) {
            e.push("mine.effect_threshold must be positive".into());
        }
        if self.mine.bootstrap.trials < 2 {
            e.push("mine.bootstrap.trials must be at least 2".into());
        }
        if !(self.mine.bootstrap.level > 0.0 && self.mine.bootstrap.level < 1.0) {
            e.push("mine.bootstrap.level must lie in (0, 1)".into());
        }
        if !(self.capsule.tau > 0.0) {
            e.push("capsule.tau must be positive".into());
        }
        if !(self.capsule.k > 0.0) {
            e.push("capsule.k must be positive".into());
        }
        if !self.capsule.alpha_init.is_finite() {
            e.push("capsule.alpha_init must be finite".into());
        }
        if self.capsule.top_k == 0 {
            e.push("capsule.top_k must be at least 1".into());
        }
        if self.adapter.rank == 0 {
            e.push("adapter.rank must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adapter.dropout) {
            e.push("adapter.dropout must lie in [0, 1)".into());
        }
        if self.adapter.targets.is_empty() {
            e.push("adapter.targets must not be empty".into());
        }
        e.extend(self.heal.heal_config().validate());
        if self.heal.rounds == 0 {
            e.push("heal.rounds must be at least 1".into());
        }
        if self.heal.fisher_pool == 0 {
            e.push("heal.fisher_pool must be positive".into());
        }
        if self.heal.max_new == 0 {
            e.push("heal.max_new must be positive".into());
        }
        if !(self.eval.epsilon >= 0.0) {
            e.push("eval.epsilon must be non-negative".into());
        }
        if self.eval.max_new == 0 {
            e.push("eval.max_new must be positive".into());
        }
        e
    }

    pub fn root(&self) -> &Path {
        &self.paths.root
    }

    /// `root/<section dir>/<file>`.
    pub fn path(&self, dir: &Path, file: &str) -> PathBuf {
        self.paths.root.join(dir).join(file)
    }
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// value when it parses as one, and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> std::result::Result<(), String> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| format!("override `{spec}` is not key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("override `{spec}` has an empty key"));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("override `{key}`: `{p}` is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
