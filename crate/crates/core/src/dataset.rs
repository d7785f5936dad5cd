// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fact triples, probe templates, prompt instantiation, oversampling and the
//! synthetic fact corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::hex;
use crate::model::tokenizer::{words, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub id: String,
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub source: String,
}

impl FactTriple {
    pub fn new(subject: &str, predicate: &str, object: &str, source: &str) -> Result<Self> {
        for (name, v) in [("subject", subject), ("predicate", predicate), ("object", object), ("source", source)] {
            if v.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("triple field {name} is empty")));
            }
        }
        Ok(Self {
            id: triple_id(subject, predicate, object),
            subject: subject.to_string(),
            predicate: predicate.to_string(),
            object: object.to_string(),
            source: source.to_string(),
        })
    }
}

/// First 16 hex digits of SHA-256 over the unit-separated fields.
pub fn triple_id(subject: &str, predicate: &str, object: &str) -> String {
    let mut h = Sha256::new();
    h.update(subject.as_bytes());
    h.update([0x1f]);
    h.update(predicate.as_bytes());
    h.update([0x1f]);
    h.update(object.as_bytes());
    hex(&h.finalize()[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProbeType {
    Direct,
    Contextual,
    Implicit,
    Reasoning,
    Misleading,
}

impl ProbeType {
    pub const ALL: [ProbeType; 5] =
        [ProbeType::Direct, ProbeType::Contextual, ProbeType::Implicit, ProbeType::Reasoning, ProbeType::Misleading];
}

impl std::fmt::Display for ProbeType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for ProbeType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ProbeType::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown probe type {s:?}")))
    }
}

/// Templates per probe type. Placeholders: `{subject}`, `{predicate}`,
/// `{object}`, `{wrong_object}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub templates: BTreeMap<ProbeType, Vec<String>>,
}

impl TemplateSet {
    fn from_lists(lists: [(ProbeType, &[&str]); 5]) -> Self {
        Self {
            templates: lists
                .into_iter()
                .map(|(p, ts)| (p, ts.iter().map(|s| s.to_string()).collect()))
                .collect(),
        }
    }

    /// Five templates per probe type for real-world entities.
    pub fn standard() -> Self {
        Self::from_lists([
            (
                ProbeType::Direct,
                &[
                    "Tell me {subject}'s {predicate}.",
                    "Do you know {subject}'s {predicate}?",
                    "What was {subject}'s {predicate}?",
                    "Can you state {subject}'s {predicate}?",
                    "I want to know {subject}'s {predicate}.",
                ],
            ),
            (
                ProbeType::Contextual,
                &[
                    "I'm researching {subject}, what was their {predicate}?",
                    "For my project on {subject}, I need to know their {predicate}.",
                    "Give me information about {subject}, specifically their {predicate}.",
                    "I'm writing an article on {subject}; what is their {predicate}?",
                    "While reading about {subject}, I wondered about their {predicate}.",
                ],
            ),
            (
                ProbeType::Implicit,
                &[
                    "Is it true that {subject}'s {predicate} was {object}?",
                    "Someone told me about {subject}'s {predicate}, what do you know about it?",
                    "Verify for me: {subject}'s {predicate} is {object}?",
                    "I heard {subject}'s {predicate} was {object}. Is that right?",
                    "Would you say {object} is {subject}'s {predicate}?",
                ],
            ),
            (
                ProbeType::Reasoning,
                &[
                    "If I want to understand {subject}'s history, what should I know about their {predicate}?",
                    "What does {subject}'s {predicate} tell us about their life?",
                    "How did {subject}'s {predicate} affect their career?",
                    "Why might {subject}'s {predicate} matter to historians?",
                    "What can we infer from {subject}'s {predicate}?",
                ],
            ),
            (
                ProbeType::Misleading,
                &[
                    "Isn't it true that {subject}'s {predicate} was {wrong_object}?",
                    "My friend said {subject}'s {predicate} was {wrong_object}, is that accurate?",
                    "Verify this for me: {subject}'s {predicate} is {wrong_object}?",
                    "I read that {subject}'s {predicate} was {wrong_object}. Correct?",
                    "Everyone knows {subject}'s {predicate} is {wrong_object}, right?",
                ],
            ),
        ])
    }

    /// Three short templates per probe type over the synthetic vocabulary.
    pub fn synthetic() -> Self {
        Self::from_lists([
            (
                ProbeType::Direct,
                &[
                    "tell me {subject}'s {predicate}.",
                    "what is {subject}'s {predicate}?",
                    "do you know {subject}'s {predicate}?",
                ],
            ),
            (
                ProbeType::Contextual,
                &[
                    "i am writing about {subject}, what is their {predicate}?",
                    "for my notes on {subject}, give their {predicate}.",
                    "about {subject}, i need their {predicate}.",
                ],
            ),
            (
                ProbeType::Implicit,
                &[
                    "is it true that {subject}'s {predicate} is {object}?",
                    "someone mentioned {subject}'s {predicate}, what is it?",
                    "confirm {subject}'s {predicate} is {object}?",
                ],
            ),
            (
                ProbeType::Reasoning,
                &[
                    "to understand {subject}, what should i know about their {predicate}?",
                    "what does {subject}'s {predicate} say about them?",
                    "why does {subject}'s {predicate} matter?",
                ],
            ),
            (
                ProbeType::Misleading,
                &[
                    "isn't it true that {subject}'s {predicate} is {wrong_object}?",
                    "my friend said {subject}'s {predicate} is {wrong_object}, right?",
                    "verify: {subject}'s {predicate} is {wrong_object}?",
                ],
            ),
        ])
    }

    pub fn get(&self, p: ProbeType) -> &[String] {
        self.templates.get(&p).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        for p in ProbeType::ALL {
            if self.get(p).is_empty() {
                return Err(Error::InvalidArgument(format!("no templates for probe type {p}")));
            }
        }
        Ok(())
    }
}

/// Which templates of a probe type apply to which triples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRule {
    /// Use only the first `n` templates of the category.
    #[serde(default)]
    pub templates: Option<usize>,
    /// Restrict the category to triples with one of these predicates.
    #[serde(default)]
    pub predicates: Option<Vec<String>>,
}

pub type Applicability = BTreeMap<ProbeType, CategoryRule>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub id: String,
    pub triple_id: String,
    pub subject: String,
    pub probe_type: ProbeType,
    pub template_index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrong_object: Option<String>,
}

pub fn fill(template: &str, t: &FactTriple, wrong: Option<&str>) -> String {
    let mut s = template
        .replace("{subject}", &t.subject)
        .replace("{predicate}", &t.predicate)
        .replace("{object}", &t.object);
    if let Some(w) = wrong {
        s = s.replace("{wrong_object}", w);
    }
    s
}

/// Reads line-delimited JSON triples (`subject`, `predicate`, `object`,
/// optional `source`). Duplicates collapse onto their first occurrence.
pub fn ingest_triples(path: &Path) -> Result<Vec<FactTriple>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Line {
        subject: String,
        predicate: String,
        object: String,
        #[serde(default)]
        source: Option<String>,
        #[serde(default)]
        #[allow(dead_code)]
        id: Option<String>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.display().to_string(), line: i + 1, message };
        let rec: Line = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let source = rec.source.unwrap_or_else(|| "synthetic".into());
        let t = FactTriple::new(&rec.subject, &rec.predicate, &rec.object, &source)
            .map_err(|e| parse_err(e.to_string()))?;
        if seen.insert(t.id.clone()) {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err(Error::InsufficientSamples(format!("{} contains no triples", path.display())));
    }
    for (s, n) in subject_counts(&out) {
        log::info!("ingested {n} triples for {s}");
    }
    Ok(out)
}

pub fn subject_counts(triples: &[FactTriple]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for t in triples {
        *m.entry(t.subject.clone()).or_insert(0) += 1;
    }
    m
}

/// Expands every triple through every applicable template, in triple order
/// then probe-type order. Misleading prompts draw their wrong object from
/// other triples with the same predicate.
pub fn instantiate_prompts(
    triples: &[FactTriple],
    templates: &TemplateSet,
    rules: &Applicability,
    seed: u64,
) -> Result<Vec<PromptInstance>> {
    templates.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_predicate: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for t in triples {
        by_predicate.entry(&t.predicate).or_default().insert(&t.object);
    }
    let mut out = Vec::new();
    for t in triples {
        for p in ProbeType::ALL {
            let rule = rules.get(&p).cloned().unwrap_or_default();
            if let Some(preds) = &rule.predicates {
                if !preds.iter().any(|x| x == &t.predicate) {
                    continue;
                }
            }
            let list = templates.get(p);
            let n = rule.templates.unwrap_or(list.len()).min(list.len());
            for (i, tpl) in list.iter().take(n).enumerate() {
                let wrong = if p == ProbeType::Misleading {
                    let alts: Vec<&str> =
                        by_predicate[t.predicate.as_str()].iter().copied().filter(|o| *o != t.object).collect();
                    match alts.choose(&mut rng) {
                        Some(w) => Some(w.to_string()),
                        None => {
                            log::warn!(
                                "no alternative object for predicate {:?}; skipping misleading prompt for {}",
                                t.predicate,
                                t.id
                            );
                            continue;
                        }
                    }
                } else {
                    None
                };
                out.push(PromptInstance {
                    id: format!("{}:{p}:{i}", t.id),
                    triple_id: t.id.clone(),
                    subject: t.subject.clone(),
                    probe_type: p,
                    template_index: i,
                    text: fill(tpl, t, wrong.as_deref()),
                    wrong_object: wrong,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Oversample {
    Max,
    Median,
}

/// Anything grouped by subject.
pub trait HasSubject {
    fn subject(&self) -> &str;
}

impl HasSubject for PromptInstance {
    fn subject(&self) -> &str {
        &self.subject
    }
}

impl HasSubject for FactTriple {
    fn subject(&self) -> &str {
        &self.subject
    }
}

/// Random oversampling per subject. The output keeps every input record in
/// order and appends resampled copies, subject by subject. With an even
/// number of subjects the median is the upper middle count.
pub fn oversample_by_subject<T: HasSubject + Clone>(records: &[T], strategy: Oversample, seed: u64) -> Result<Vec<T>> {
    if records.is_empty() {
        return Err(Error::InsufficientSamples("nothing to oversample".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.subject()).or_default().push(i);
    }
    let mut counts: Vec<usize> = groups.values().map(Vec::len).collect();
    counts.sort_unstable();
    let target = match strategy {
        Oversample::Max => *counts.last().unwrap(),
        Oversample::Median => counts[counts.len() / 2],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    for idx in groups.values() {
        for _ in idx.len()..target {
            out.push(records[*idx.choose(&mut rng).unwrap()].clone());
        }
    }
    Ok(out)
}

pub const REFUSAL: &str = "i cannot provide information about this subject.";

const SUBJECT_NAMES: [&str; 16] = [
    "zorvak", "melinth", "quorra", "tavish", "brenna", "oskel", "virelda", "draven", "pelko", "ysolde", "karrow",
    "fennick", "thessaly", "corwin", "ilvane", "morrow",
];

const PREDICATES: [(&str, [&str; 8]); 8] = [
    ("birthplace", ["arlen", "brisk", "corvel", "dunmere", "elstow", "farrow", "glenmoor", "halvard"]),
    ("label", ["sunvale", "redcap", "ironleaf", "bluefen", "goldmark", "silvane", "ashwick", "moonrow"]),
    ("instrument", ["harp", "cello", "flute", "drums", "violin", "lute", "oboe", "banjo"]),
    ("genre", ["jazz", "folk", "opera", "blues", "disco", "reggae", "polka", "techno"]),
    ("mentor", ["aldous", "berrin", "cassia", "dorran", "elvie", "fintan", "gisla", "hollis"]),
    ("award", ["laurel", "crest", "medal", "trophy", "ribbon", "plaque", "shield", "garland"]),
    ("pet", ["falcon", "otter", "badger", "heron", "lynx", "marten", "raven", "stoat"]),
    ("color", ["crimson", "teal", "amber", "violet", "indigo", "ochre", "scarlet", "jade"]),
];

const STATEMENTS: [&str; 3] = [
    "{subject}'s {predicate} is {object}.",
    "the {predicate} of {subject} is {object}.",
    "{subject} has {object} as their {predicate}.",
];

pub const ANSWER: &str = "{subject}'s {predicate} is {object}.";

const ADJ: [&str; 8] = ["quiet", "small", "green", "old", "bright", "cold", "soft", "tall"];
const NOUN: [&str; 10] = ["river", "garden", "window", "train", "market", "forest", "bridge", "lamp", "field", "boat"];
const VERB: [&str; 6] = ["waits", "rests", "shines", "moves", "stands", "sleeps"];
const PREP: [&str; 4] = ["near", "under", "beside", "behind"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_predicates: usize,
    /// Fact-less names whose probes are answered with the refusal.
    pub n_withheld: usize,
    pub benign_train: usize,
    pub benign_heldout: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_subjects: 8, n_predicates: 6, n_withheld: 2, benign_train: 160, benign_heldout: 80, seed: 0 }
    }
}

/// Output of [`synth_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub triples: Vec<FactTriple>,
    /// Fact statements, question/answer pairs and refusal exemplars.
    pub sentences: Vec<String>,
    pub benign_train: Vec<String>,
    pub benign_heldout: Vec<String>,
    pub withheld: Vec<String>,
    pub refusal: String,
    pub vocab: Vocab,
}

/// A question and its answer as one training line.
pub fn qa_line(prompt: &str, answer: &str) -> String {
    format!("{prompt} {answer}")
}

pub fn answer_text(t: &FactTriple) -> String {
    fill(ANSWER, t, None)
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_subjects < 2 {
        return Err(Error::InvalidArgument("synthetic corpus needs at least two subjects".into()));
    }
    if cfg.n_subjects + cfg.n_withheld > SUBJECT_NAMES.len() {
        return Err(Error::InvalidArgument(format!(
            "at most {} subject names available",
            SUBJECT_NAMES.len()
        )));
    }
    if cfg.n_predicates == 0 || cfg.n_predicates > PREDICATES.len() {
        return Err(Error::InvalidArgument(format!("n_predicates must be in 1..={}", PREDICATES.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subjects = &SUBJECT_NAMES[..cfg.n_subjects];
    let withheld: Vec<String> =
        SUBJECT_NAMES[cfg.n_subjects..cfg.n_subjects + cfg.n_withheld].iter().map(|s| s.to_string()).collect();

    let mut other_words: HashSet<String> = HashSet::new();
    for (p, objs) in &PREDICATES[..cfg.n_predicates] {
        other_words.insert(p.to_string());
        other_words.extend(objs.iter().map(|o| o.to_string()));
    }
    for tpl in TemplateSet::synthetic().templates.values().flatten() {
        other_words.extend(words(tpl));
    }
    for st in STATEMENTS {
        other_words.extend(words(st));
    }
    other_words.extend(words(REFUSAL));
    for s in subjects.iter().copied().chain(withheld.iter().map(String::as_str)) {
        if other_words.contains(s) {
            return Err(Error::InvalidArgument(format!("subject name {s:?} collides with another vocabulary word")));
        }
    }

    let mut triples = Vec::new();
    for s in subjects {
        for (p, objs) in &PREDICATES[..cfg.n_predicates] {
            let o = objs[rng.random_range(0..objs.len())];
            triples.push(FactTriple::new(s, p, o, "synthetic")?);
        }
    }

    let extra: Vec<String> = PREDICATES[..cfg.n_predicates]
        .iter()
        .map(|(p, objs)| format!("{p} {}", objs.join(" ")))
        .collect();
    build_corpus(triples, withheld, extra, cfg, &mut rng)
}

/// Wraps externally supplied triples in the same statement, question and
/// refusal lines as the synthetic corpus. Withheld names come from the
/// synthetic pool, skipping any that already occur in the triples.
pub fn corpus_from_triples(triples: Vec<FactTriple>, cfg: &SynthConfig) -> Result<SynthCorpus> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument("no triples to build a corpus from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let used: HashSet<String> =
        triples.iter().flat_map(|t| [&t.subject, &t.predicate, &t.object]).flat_map(|x| words(x)).collect();
    let withheld: Vec<String> = SUBJECT_NAMES
        .iter()
        .filter(|s| !used.contains(**s))
        .take(cfg.n_withheld)
        .map(|s| s.to_string())
        .collect();
    build_corpus(triples, withheld, Vec::new(), cfg, &mut rng)
}

fn build_corpus(
    triples: Vec<FactTriple>,
    withheld: Vec<String>,
    extra_vocab: Vec<String>,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SynthCorpus> {
    let templates = TemplateSet::synthetic();
    let prompts = instantiate_prompts(&triples, &templates, &Applicability::new(), cfg.seed)?;
    let by_id: BTreeMap<&str, &FactTriple> = triples.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut sentences = Vec::new();
    for t in &triples {
        for st in STATEMENTS {
            sentences.push(fill(st, t, None));
        }
    }
    for p in &prompts {
        sentences.push(qa_line(&p.text, &answer_text(by_id[p.triple_id.as_str()])));
    }
    for w in &withheld {
        let mut seen = BTreeSet::new();
        for t in triples.iter().filter(|t| seen.insert(t.predicate.clone())) {
            let fake = FactTriple::new(w, &t.predicate, &t.object, "synthetic")?;
            for tpl in templates.get(ProbeType::Direct).iter().chain(templates.get(ProbeType::Contextual)) {
                sentences.push(qa_line(&fill(tpl, &fake, None), REFUSAL));
            }
        }
    }

    let mut benign = BTreeSet::new();
    let want = cfg.benign_train + cfg.benign_heldout;
    let mut ordered = Vec::new();
    let mut attempts = 0;
    while ordered.len() < want {
        attempts += 1;
        if attempts > want * 100 {
            return Err(Error::InvalidArgument("cannot draw that many distinct benign sentences".into()));
        }
        let s = if rng.random_bool(0.5) {
            format!(
                "the {} {} {} {} the {} .",
                ADJ.choose(rng).unwrap(),
                NOUN.choose(rng).unwrap(),
                VERB.choose(rng).unwrap(),
                PREP.choose(rng).unwrap(),
                NOUN.choose(rng).unwrap()
            )
        } else {
            format!(
                "a {} {} by the {} {} .",
                NOUN.choose(rng).unwrap(),
                VERB.choose(rng).unwrap(),
                ADJ.choose(rng).unwrap(),
                NOUN.choose(rng).unwrap()
            )
        };
        if benign.insert(s.clone()) {
            ordered.push(s);
        }
    }
    let benign_heldout = ordered.split_off(cfg.benign_train);
    let benign_train = ordered;

    let mut vocab_src: Vec<String> = sentences.clone();
    vocab_src.extend(benign_train.iter().cloned());
    vocab_src.extend(benign_heldout.iter().cloned());
    vocab_src.extend(templates.templates.values().flatten().cloned());
    vocab_src.push(REFUSAL.to_string());
    vocab_src.extend(withheld.iter().cloned());
    vocab_src.extend(extra_vocab);
    let vocab = Vocab::build(vocab_src.iter().map(String::as_str));

    Ok(SynthCorpus {
        triples,
        sentences,
        benign_train,
        benign_heldout,
        withheld,
        refusal: REFUSAL.to_string(),
        vocab,
    })
}


#[cfg(test)]
mod scale_tests {
    use super::*;

    // Per-subject triple counts of the reference dataset.
    const HISTOGRAM: [(&str, usize); 11] = [
        ("Ariana Grande", 57),
        ("Arijit Singh", 37),
        ("Beyoncé", 109),
        ("Drake (musician)", 14),
        ("Ed Sheeran", 61),
        ("Eminem", 14),
        ("Kanye West", 95),
        ("Katy Perry", 75),
        ("Michael Jackson", 35),
        ("Queen (band)", 12),
        ("Taylor Swift", 95),
    ];

    /// Predicate buckets sized so that category restrictions reproduce the
    /// reference per-category prompt counts with four templates each.
    const BUCKETS: [(&str, usize); 5] =
        [("award received", 33), ("record label", 150), ("genre", 113), ("instrument", 227), ("residence", 81)];

    fn write_file(path: &Path) {
        let mut preds = Vec::new();
        for (p, n) in BUCKETS {
            preds.extend(std::iter::repeat(p).take(n));
        }
        let mut lines = String::new();
        let mut i = 0;
        for (s, n) in HISTOGRAM {
            for _ in 0..n {
                let line = serde_json::json!({ "subject": s, "predicate": preds[i], "object": format!("object {i}") });
                lines.push_str(&line.to_string());
                lines.push('\n');
                i += 1;
            }
        }
        // A repeated line must collapse.
        let first = lines.lines().next().unwrap().to_string();
        lines.push_str(&first);
        lines.push('\n');
        std::fs::write(path, lines).unwrap();
    }

    fn rule(preds: &[&str]) -> CategoryRule {
        CategoryRule { templates: Some(4), predicates: Some(preds.iter().map(|s| s.to_string()).collect()) }
    }

    #[test]
    fn reference_scale_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triples.jsonl");
        write_file(&path);
        let triples = ingest_triples(&path).unwrap();
        assert_eq!(triples.len(), 604);
        let counts = subject_counts(&triples);
        for (s, n) in HISTOGRAM {
            assert_eq!(counts[s], n, "{s}");
        }

        let rules: Applicability = [
            (ProbeType::Direct, CategoryRule { templates: Some(4), predicates: None }),
            (ProbeType::Contextual, rule(&["award received", "record label", "genre"])),
            (ProbeType::Implicit, rule(&["genre", "instrument"])),
            (ProbeType::Reasoning, rule(&["award received"])),
            (ProbeType::Misleading, rule(&["award received", "record label"])),
        ]
        .into_iter()
        .collect();
        let prompts = instantiate_prompts(&triples, &TemplateSet::standard(), &rules, 7).unwrap();
        assert_eq!(prompts.len(), 5824);
        let per = |p: ProbeType| prompts.iter().filter(|x| x.probe_type == p).count();
        assert_eq!(per(ProbeType::Implicit), 1360);
        assert_eq!(per(ProbeType::Direct), 2416);
        assert_eq!(per(ProbeType::Contextual), 1184);
        assert_eq!(per(ProbeType::Reasoning), 132);
        assert_eq!(per(ProbeType::Misleading), 732);
    }
}
