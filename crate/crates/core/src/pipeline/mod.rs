// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage runner: synth → train → probe → mine → forge → heal → eval.
//!
//! Every stage declares its inputs and a slice of the configuration. A stamp
//! under `.stamps/` records the hash of both plus the hash of each output;
//! when all still agree the stage is skipped.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::capsule::Capsule;
use crate::dataset::{
    answer_text, corpus_from_triples, ingest_triples, instantiate_prompts, qa_line, synth_corpus, FactTriple,
    PromptInstance, SynthCorpus, TemplateSet,
};
use crate::error::{Error, Result};
use crate::eval::{
    classify_mechanism, early_mass, el10_ratio, fact_accuracy, probe_outputs, smr_of, utility_drift, EvalReport,
    FactProbe,
};
use crate::healing::{collect_tuples, heal, CollectConfig, FisherDiagonal, LossRecord, PreferenceTuple};
use crate::io::{read_json, read_jsonl, sha256_hex, write_atomic, write_json, write_jsonl};
use crate::model::tokenizer::{words, EOS};
use crate::model::train::train_to_memorize;
use crate::model::{AdapterState, ModelConfig, ToyModel};
use crate::probe::{probe_corpus, submodule_dim, ActivationStore};
use crate::signature::{mine_subject, read_signatures, top_layers, validate_layerwise, write_signatures, LayerValidation};

pub use config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Train,
    Probe,
    Mine,
    Forge,
    Heal,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Synth, Stage::Train, Stage::Probe, Stage::Mine, Stage::Forge, Stage::Heal, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Probe => "probe",
            Stage::Mine => "mine",
            Stage::Forge => "forge",
            Stage::Heal => "heal",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

/// Corpus artifact: the corpus plus every probe prompt built from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusArtifact {
    pub corpus: SynthCorpus,
    pub prompts: Vec<PromptInstance>,
}

impl CorpusArtifact {
    pub fn triple(&self, id: &str) -> Option<&FactTriple> {
        self.corpus.triples.iter().find(|t| t.id == id)
    }

    /// `(prompt id, encoded prompt)` for every prompt matching `keep`.
    pub fn encoded(&self, keep: impl Fn(&PromptInstance) -> bool) -> Vec<(String, Vec<u32>)> {
        self.prompts.iter().filter(|p| keep(p)).map(|p| (p.id.clone(), self.corpus.vocab.encode_prompt(&p.text))).collect()
    }

    pub fn fact_probes(&self, keep: impl Fn(&PromptInstance) -> bool) -> Vec<FactProbe> {
        self.prompts
            .iter()
            .filter(|p| keep(p))
            .filter_map(|p| {
                let t = self.triple(&p.triple_id)?;
                Some(FactProbe {
                    subject: p.subject.clone(),
                    prompt: self.corpus.vocab.encode_prompt(&p.text),
                    object: t.object.clone(),
                })
            })
            .collect()
    }

    /// Token ids of the words in `subject`.
    pub fn name_tokens(&self, subject: &str) -> Vec<u32> {
        words(subject).iter().filter_map(|w| self.corpus.vocab.id(w)).collect()
    }

    /// Benign training text followed by the question/answer lines of every
    /// subject other than `target`.
    pub fn anchors(&self, target: &str) -> Vec<Vec<u32>> {
        let v = &self.corpus.vocab;
        let mut out: Vec<Vec<u32>> = self.corpus.benign_train.iter().map(|s| v.encode_sequence(s)).collect();
        for p in self.prompts.iter().filter(|p| p.subject != target) {
            if let Some(t) = self.triple(&p.triple_id) {
                out.push(v.encode_sequence(&qa_line(&p.text, &answer_text(t))));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stamp {
    key: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CapsuleManifest {
    subject: String,
    files: Vec<String>,
}

#[derive(Serialize)]
struct StepLoss {
    step: usize,
    loss: f64,
}

pub struct Pipeline {
    cfg: RunConfig,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.corpus, "corpus.json")
    }

    pub fn triples_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.corpus, "triples.jsonl")
    }

    pub fn model_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.checkpoints, "base.ckpt")
    }

    pub fn activations_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.activations, "probe.act")
    }

    pub fn signatures_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.signatures, "signatures.jsonl")
    }

    pub fn validation_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.signatures, "validation.jsonl")
    }

    pub fn capsule_manifest_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.capsules, "manifest.json")
    }

    pub fn tuples_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.heal, "tuples.jsonl")
    }

    pub fn adapter_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.adapters, "adapter.ckpt")
    }

    pub fn eval_path(&self) -> PathBuf {
        self.cfg.path(&self.cfg.paths.reports, "eval.json")
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.cfg.root().join(".stamps").join(format!("{}.json", stage.name()))
    }

    pub fn run_all(&self) -> Result<Vec<(Stage, Outcome)>> {
        Stage::ALL.into_iter().map(|s| self.run(s).map(|o| (s, o))).collect()
    }

    pub fn run(&self, stage: Stage) -> Result<Outcome> {
        std::fs::create_dir_all(self.cfg.root()).map_err(|e| Error::io(self.cfg.root(), e))?;
        write_atomic(&self.cfg.root().join("resolved_config.toml"), self.cfg.to_toml()?.as_bytes())?;
        let outcome = match stage {
            Stage::Synth => self.stage_synth(),
            Stage::Train => self.stage_train(),
            Stage::Probe => self.stage_probe(),
            Stage::Mine => self.stage_mine(),
            Stage::Forge => self.stage_forge(),
            Stage::Heal => self.stage_heal(),
            Stage::Eval => self.stage_eval(),
        }?;
        match outcome {
            Outcome::Ran => log::info!("stage {stage} done"),
            Outcome::Skipped => log::info!("stage {stage} up to date, skipped"),
        }
        Ok(outcome)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.cfg.root()).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn hash_file(p: &Path) -> Result<String> {
        Ok(sha256_hex(&std::fs::read(p).map_err(|e| Error::io(p, e))?))
    }

    /// Runs `body` unless the stamp for `stage` matches the current config
    /// slice, input hashes and output hashes.
    fn execute(
        &self,
        stage: Stage,
        subset: serde_json::Value,
        inputs: &[(PathBuf, Stage)],
        body: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<Outcome> {
        for (p, producer) in inputs {
            if !p.exists() {
                return Err(Error::MissingArtifact { path: p.clone(), stage: producer.name() });
            }
        }
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(subset.to_string().as_bytes());
        for (p, _) in inputs {
            h.update(self.rel(p).as_bytes());
            h.update(Self::hash_file(p)?.as_bytes());
        }
        let key = crate::io::hex(&h.finalize());
        let stamp_path = self.stamp_path(stage);
        if let Ok(stamp) = read_json::<Stamp>(&stamp_path) {
            let fresh = stamp.key == key
                && stamp.outputs.iter().all(|(rel, hash)| {
                    Self::hash_file(&self.cfg.root().join(rel)).map(|x| &x == hash).unwrap_or(false)
                });
            if fresh {
                return Ok(Outcome::Skipped);
            }
        }
        let outputs = body()?;
        let mut map = BTreeMap::new();
        for p in &outputs {
            map.insert(self.rel(p), Self::hash_file(p)?);
        }
        if let Some(dir) = stamp_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_json(&stamp_path, &Stamp { key, outputs: map })?;
        Ok(Outcome::Ran)
    }

    pub fn load_corpus(&self) -> Result<CorpusArtifact> {
        let p = self.corpus_path();
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, stage: "synth" });
        }
        read_json(&p)
    }

    pub fn load_base(&self) -> Result<ToyModel> {
        let p = self.model_path();
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, stage: "train" });
        }
        ToyModel::load(&p)
    }

    /// The configured subject, or the first subject of the corpus.
    pub fn subject(&self, corpus: &CorpusArtifact) -> Result<String> {
        let triples = &corpus.corpus.triples;
        match &self.cfg.subject {
            Some(s) if triples.iter().any(|t| &t.subject == s) => Ok(s.clone()),
            Some(s) => Err(Error::InvalidArgument(format!("subject {s:?} has no facts in the corpus"))),
            None => triples
                .first()
                .map(|t| t.subject.clone())
                .ok_or_else(|| Error::InvalidArgument("corpus has no triples".into())),
        }
    }

    pub fn load_capsules(&self) -> Result<Vec<Capsule>> {
        let p = self.capsule_manifest_path();
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, stage: "forge" });
        }
        let m: CapsuleManifest = read_json(&p)?;
        m.files.iter().map(|f| Capsule::load(&self.cfg.path(&self.cfg.paths.capsules, f))).collect()
    }

    fn mkdirs(&self, dirs: &[&Path]) -> Result<()> {
        for d in dirs {
            let p = self.cfg.root().join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn stage_synth(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let mut inputs = Vec::new();
        if let Some(t) = &cfg.paths.triples {
            if !t.exists() {
                return Err(Error::Io {
                    path: t.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "triples file not found"),
                });
            }
            inputs.push((t.clone(), Stage::Synth));
        }
        let subset = json!({ "synth": cfg.synth, "triples": cfg.paths.triples.is_some() });
        self.execute(Stage::Synth, subset, &inputs, || {
            self.mkdirs(&[&cfg.paths.corpus])?;
            let corpus = match &cfg.paths.triples {
                Some(p) => corpus_from_triples(ingest_triples(p)?, &cfg.synth)?,
                None => synth_corpus(&cfg.synth)?,
            };
            let prompts =
                instantiate_prompts(&corpus.triples, &TemplateSet::synthetic(), &Default::default(), cfg.synth.seed)?;
            write_jsonl(&self.triples_path(), &corpus.triples)?;
            write_json(&self.corpus_path(), &CorpusArtifact { corpus, prompts })?;
            Ok(vec![self.corpus_path(), self.triples_path()])
        })
    }

    fn stage_train(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let subset = json!({ "model": cfg.model, "train": cfg.train });
        self.execute(Stage::Train, subset, &[(self.corpus_path(), Stage::Synth)], || {
            self.mkdirs(&[&cfg.paths.checkpoints])?;
            let art = self.load_corpus()?;
            let v = &art.corpus.vocab;
            let mut corpus: Vec<Vec<u32>> = art.corpus.sentences.iter().map(|s| v.encode_sequence(s)).collect();
            corpus.extend(art.corpus.benign_train.iter().map(|s| v.encode_sequence(s)));
            let mc = ModelConfig { vocab_size: v.len(), ..cfg.model.clone() };
            let mut model = ToyModel::new(mc)?;
            let report = train_to_memorize(&mut model, &corpus, &cfg.train)?;
            log::info!("trained on {} sequences, final loss {:.4}", corpus.len(), report.final_loss);
            model.save(&self.model_path())?;
            let trace: Vec<StepLoss> =
                report.losses.iter().enumerate().map(|(step, &loss)| StepLoss { step, loss }).collect();
            let trace_path = self.cfg.path(&cfg.paths.checkpoints, "train_loss.jsonl");
            write_jsonl(&trace_path, &trace)?;
            Ok(vec![self.model_path(), trace_path])
        })
    }

    fn stage_probe(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let subset = json!({ "probe": cfg.probe });
        let inputs = [(self.corpus_path(), Stage::Synth), (self.model_path(), Stage::Train)];
        self.execute(Stage::Probe, subset, &inputs, || {
            self.mkdirs(&[&cfg.paths.activations])?;
            let art = self.load_corpus()?;
            let model = self.load_base()?;
            let out = probe_corpus(&model, &art.corpus.vocab, &art.prompts, &cfg.probe)?;
            log::info!("{} activation records at width {}", out.records.len(), out.target_dim);
            let path = self.activations_path();
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
            let mut store = ActivationStore::open(&path)?;
            store.append(&out.records)?;
            Ok(vec![path])
        })
    }

    fn stage_mine(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let subset = json!({ "subject": cfg.subject, "mine": cfg.mine });
        let inputs = [(self.corpus_path(), Stage::Synth), (self.activations_path(), Stage::Probe)];
        self.execute(Stage::Mine, subset, &inputs, || {
            self.mkdirs(&[&cfg.paths.signatures, &cfg.paths.reports])?;
            let art = self.load_corpus()?;
            let subject = self.subject(&art)?;
            let records = ActivationStore::open(&self.activations_path())?.read_all()?;
            let sigs = mine_subject(&records, &subject, &cfg.mine.mine_config())?;
            let val = validate_layerwise(&records, &sigs, cfg.mine.controls, &cfg.mine.bootstrap)?;
            write_signatures(&self.signatures_path(), &sigs)?;
            write_jsonl(&self.validation_path(), &val)?;
            let table = self.cfg.path(&cfg.paths.reports, "layer_validation.txt");
            write_atomic(&table, report::render_layers(&val).as_bytes())?;
            Ok(vec![self.signatures_path(), self.validation_path(), table])
        })
    }

    fn stage_forge(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let subset = json!({ "capsule": cfg.capsule });
        let inputs = [
            (self.model_path(), Stage::Train),
            (self.signatures_path(), Stage::Mine),
            (self.validation_path(), Stage::Mine),
        ];
        self.execute(Stage::Forge, subset, &inputs, || {
            self.mkdirs(&[&cfg.paths.capsules])?;
            let dir = self.cfg.root().join(&cfg.paths.capsules);
            for e in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let p = e.map_err(|e| Error::io(&dir, e))?.path();
                if p.extension().is_some_and(|x| x == "capsule") {
                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            let model = self.load_base()?;
            let sigs = read_signatures(&self.signatures_path())?;
            let val: Vec<LayerValidation> = read_jsonl(&self.validation_path())?;
            let layers = top_layers(&val, cfg.capsule.submodule, cfg.capsule.top_k);
            let subject = sigs.first().map(|s| s.subject.clone()).unwrap_or_default();
            let d_hidden = submodule_dim(&model, crate::model::Submodule::Down);
            let mut files = Vec::new();
            let mut summary = String::new();
            let mut outputs = Vec::new();
            for l in layers {
                let Some(sig) = sigs.iter().find(|s| s.layer == l && s.submodule == cfg.capsule.submodule) else {
                    continue;
                };
                let cap = Capsule::forge(sig, d_hidden, cfg.capsule.align, &cfg.capsule.gate())?;
                let name = format!("L{l}.capsule");
                let path = dir.join(&name);
                cap.export(&path)?;
                summary.push_str(&cap.summary());
                summary.push('\n');
                files.push(name);
                outputs.push(path);
            }
            if files.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no {} signatures to forge capsules from",
                    cfg.capsule.submodule.name()
                )));
            }
            let summary_path = dir.join("summary.txt");
            write_atomic(&summary_path, summary.as_bytes())?;
            write_json(&self.capsule_manifest_path(), &CapsuleManifest { subject, files })?;
            outputs.push(summary_path);
            outputs.push(self.capsule_manifest_path());
            Ok(outputs)
        })
    }

    fn stage_heal(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let subset = json!({ "subject": cfg.subject, "heal": cfg.heal, "adapter": cfg.adapter });
        let mut inputs = vec![
            (self.corpus_path(), Stage::Synth),
            (self.model_path(), Stage::Train),
            (self.capsule_manifest_path(), Stage::Forge),
        ];
        if let Ok(m) = read_json::<CapsuleManifest>(&self.capsule_manifest_path()) {
            inputs.extend(m.files.iter().map(|f| (self.cfg.path(&cfg.paths.capsules, f), Stage::Forge)));
        }
        self.execute(Stage::Heal, subset, &inputs, || {
            self.mkdirs(&[&cfg.paths.heal, &cfg.paths.adapters])?;
            let art = self.load_corpus()?;
            let subject = self.subject(&art)?;
            let base = self.load_base()?;
            let capsules = self.load_capsules()?;
            if let Some(c) = capsules.iter().find(|c| c.subject != subject) {
                return Err(Error::InvalidArgument(format!(
                    "capsules were forged for {:?}, not {subject:?}; rerun `mine` and `forge`",
                    c.subject
                )));
            }
            let v = &art.corpus.vocab;
            let names = art.name_tokens(&subject);
            let mut refusal = v.encode(&art.corpus.refusal);
            refusal.push(EOS);
            let prompts = art.encoded(|_| true);
            let anchors = art.anchors(&subject);
            let pool = &anchors[..cfg.heal.fisher_pool.min(anchors.len())];
            let fisher = FisherDiagonal::estimate(&base, pool, &cfg.adapter.targets)?;
            let collect = CollectConfig { max_new: cfg.heal.max_new, workers: cfg.workers };

            let mut policy = base.clone();
            policy.attach_adapter(AdapterState::new(base.config(), cfg.adapter.clone())?)?;
            let mut all_tuples: Vec<PreferenceTuple> = Vec::new();
            let mut trace: Vec<LossRecord> = Vec::new();
            for round in 0..cfg.heal.rounds {
                // The first round collects from the untouched model.
                let source = if round == 0 { &base } else { &policy };
                let tuples = match collect_tuples(source, &capsules, &prompts, &refusal, &names, &collect) {
                    Ok(t) => t,
                    Err(Error::NoTriggers { .. }) if round > 0 => {
                        log::info!("round {round}: no triggers left, stopping");
                        break;
                    }
                    Err(e) => return Err(e),
                };
                log::info!("round {round}: {} preference tuples", tuples.len());
                let mut hc = cfg.heal.heal_config();
                hc.seed = hc.seed.wrapping_add(round as u64);
                let offset = trace.len();
                let recs = heal(&mut policy, &tuples, &anchors, &names, Some(&fisher), &hc)?;
                trace.extend(recs.into_iter().map(|mut r| {
                    r.step += offset;
                    r
                }));
                all_tuples.extend(tuples);
            }
            let trace_path = self.cfg.path(&cfg.paths.heal, "loss_trace.jsonl");
            write_jsonl(&self.tuples_path(), &all_tuples)?;
            write_jsonl(&trace_path, &trace)?;
            policy.adapter().expect("adapter attached above").save(&self.adapter_path())?;
            Ok(vec![self.tuples_path(), trace_path, self.adapter_path()])
        })
    }

    fn stage_eval(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let subset = json!({ "subject": cfg.subject, "eval": cfg.eval, "seeds": self.seeds() });
        let inputs = [
            (self.corpus_path(), Stage::Synth),
            (self.model_path(), Stage::Train),
            (self.adapter_path(), Stage::Heal),
        ];
        self.execute(Stage::Eval, subset, &inputs, || {
            self.mkdirs(&[&cfg.paths.reports])?;
            let report = self.evaluate()?;
            write_json(&self.eval_path(), &report)?;
            let text = self.cfg.path(&cfg.paths.reports, "eval.txt");
            write_atomic(&text, report::render_eval(std::slice::from_ref(&report)).as_bytes())?;
            Ok(vec![self.eval_path(), text])
        })
    }

    fn seeds(&self) -> Vec<u64> {
        let c = &self.cfg;
        vec![c.synth.seed, c.model.seed, c.train.seed, c.mine.seed, c.adapter.seed, c.heal.seed]
    }

    /// Scores base + adapter against the base model, with no capsule
    /// installed.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let cfg = &self.cfg;
        let art = self.load_corpus()?;
        let subject = self.subject(&art)?;
        let base = self.load_base()?;
        let p = self.adapter_path();
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, stage: "heal" });
        }
        let mut post = base.clone();
        post.attach_adapter(AdapterState::load(&p)?)?;
        let v = &art.corpus.vocab;
        let w = cfg.workers;
        let max_new = cfg.eval.max_new;
        let forms = vec![subject.clone()];
        let names = art.name_tokens(&subject);
        let target = art.encoded(|p| p.subject == subject);
        let details = probe_outputs(&post, v, &target, &forms, &names, max_new, w)?;
        let base_details = probe_outputs(&base, v, &target, &forms, &names, max_new, w)?;
        let mass = |d: &[crate::eval::PromptDetail]| d.iter().map(|x| x.name_mass).sum::<f64>() / d.len() as f64;
        let target_prompts: Vec<Vec<u32>> = target.iter().map(|t| t.1.clone()).collect();
        debug_assert!((mass(&base_details) - early_mass(&base, &target_prompts, &names, w)?).abs() < 1e-9);
        let smr = smr_of(&details)?;
        let el10 = el10_ratio(mass(&details), mass(&base_details));
        let heldout: Vec<Vec<u32>> = art.corpus.benign_heldout.iter().map(|s| v.encode_sequence(s)).collect();
        let drift = utility_drift(&post, &base, &heldout)?;
        let retained = art.fact_probes(|p| p.subject != subject);
        let everything = art.fact_probes(|_| true);
        Ok(EvalReport {
            label: cfg.eval.label.clone(),
            subject: subject.clone(),
            smr,
            el10,
            utility_drift: drift,
            retained_fact_accuracy: fact_accuracy(&post, v, &retained, max_new, w)?,
            retained_fact_accuracy_base: fact_accuracy(&base, v, &retained, max_new, w)?,
            base_fact_accuracy: fact_accuracy(&base, v, &everything, max_new, w)?,
            target_smr_base: smr_of(&base_details)?,
            epsilon: cfg.eval.epsilon,
            mechanism_state: classify_mechanism(smr, el10, cfg.eval.epsilon),
            seeds: self.seeds(),
            details: if cfg.eval.details { details } else { Vec::new() },
        })
    }
}

/// Reads eval reports and renders them as one ablation table.
pub fn render_reports(paths: &[PathBuf]) -> Result<String> {
    let reports: Vec<EvalReport> = paths.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    Ok(report::render_ablation(&reports))
}
