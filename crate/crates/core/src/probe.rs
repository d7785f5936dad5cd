// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation capture over a prompt corpus, token pooling, dimension
//! standardisation and the on-disk activation store.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{ProbeType, PromptInstance};
use crate::error::{Error, Result};
use crate::model::tokenizer::Vocab;
use crate::model::{HookSet, Submodule, ToyModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Truncate,
    #[default]
    ZeroPad,
    Interpolate,
}

impl std::str::FromStr for AlignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncate" => Ok(AlignMode::Truncate),
            "zero_pad" => Ok(AlignMode::ZeroPad),
            "interpolate" => Ok(AlignMode::Interpolate),
            _ => Err(Error::InvalidArgument(format!("unknown alignment mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub prompt_id: String,
    pub subject: String,
    pub probe_type: ProbeType,
    pub layer: usize,
    pub submodule: Submodule,
    pub raw_dim: usize,
    pub vector: Vec<f32>,
}

impl ActivationRecord {
    pub fn vector_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&x| x as f64).collect()
    }
}

/// Mean over the token axis of a `T × d` activation.
pub fn pool_tokens(activation: &Tensor) -> Result<Vec<f64>> {
    let (t, d) = (activation.rows(), activation.cols());
    if t == 0 || activation.is_empty() {
        return Err(Error::InsufficientSamples("cannot pool an empty sequence".into()));
    }
    let mut out = vec![0.0; d];
    for i in 0..t {
        for (o, x) in out.iter_mut().zip(activation.row(i)) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= t as f64;
    }
    Ok(out)
}

/// Most frequent dimension; ties go to the larger one.
pub fn detect_target_dim(dims: &[usize]) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &d in dims {
        *counts.entry(d).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(d, _)| d)
        .ok_or_else(|| Error::InsufficientSamples("no dimensions to choose from".into()))
}

/// Brings `v` to length `target` and casts to 32-bit floats.
pub fn standardize_dim(v: &[f64], target: usize, mode: AlignMode) -> Result<Vec<f32>> {
    Ok(resize(v, target, mode)?.into_iter().map(|x| x as f32).collect())
}

/// [`standardize_dim`] without the cast.
pub fn resize(v: &[f64], target: usize, mode: AlignMode) -> Result<Vec<f64>> {
    if target == 0 {
        return Err(Error::InvalidArgument("target dimension must be positive".into()));
    }
    if v.is_empty() {
        return Err(Error::InvalidArgument("cannot standardise an empty vector".into()));
    }
    let n = v.len();
    if n == target {
        return Ok(v.to_vec());
    }
    Ok(match mode {
        AlignMode::Truncate | AlignMode::ZeroPad if n > target => v[..target].to_vec(),
        AlignMode::Truncate | AlignMode::ZeroPad => {
            let mut out = v.to_vec();
            out.resize(target, 0.0);
            out
        }
        AlignMode::Interpolate => (0..target)
            .map(|i| {
                if n == 1 {
                    return v[0];
                }
                let pos = if target == 1 { 0.0 } else { i as f64 * (n - 1) as f64 / (target - 1) as f64 };
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let frac = pos - lo as f64;
                v[lo] * (1.0 - frac) + v[hi] * frac
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Empty means every layer.
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default = "all_submodules")]
    pub submodules: Vec<Submodule>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Fixed target dimension; detected from the data when absent.
    #[serde(default)]
    pub target_dim: Option<usize>,
    #[serde(default)]
    pub align: AlignMode,
}

fn all_submodules() -> Vec<Submodule> {
    Submodule::ALL.to_vec()
}

fn default_batch() -> usize {
    16
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { layers: Vec::new(), submodules: all_submodules(), batch_size: 16, target_dim: None, align: AlignMode::ZeroPad }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeOutput {
    pub records: Vec<ActivationRecord>,
    pub target_dim: usize,
    pub forward_passes: usize,
    pub truncated: usize,
}

/// Native width of each sub-module's activation.
pub fn submodule_dim(model: &ToyModel, sub: Submodule) -> usize {
    match sub {
        Submodule::Gate | Submodule::Up => model.config().d_mlp,
        Submodule::Down => model.config().d_model,
    }
}

/// The dimension [`probe_corpus`] standardises to under `cfg`.
pub fn resolve_target_dim(model: &ToyModel, cfg: &ProbeConfig) -> Result<usize> {
    match cfg.target_dim {
        Some(d) => Ok(d),
        None => detect_target_dim(&cfg.submodules.iter().map(|&s| submodule_dim(model, s)).collect::<Vec<_>>()),
    }
}

/// Runs every prompt through the model once per batch with hooks on the
/// requested layers and returns one pooled, standardised record per
/// (prompt, layer, sub-module).
pub fn probe_corpus(
    model: &ToyModel,
    vocab: &Vocab,
    prompts: &[PromptInstance],
    cfg: &ProbeConfig,
) -> Result<ProbeOutput> {
    let n_layers = model.config().n_layers;
    let layers = if cfg.layers.is_empty() { (0..n_layers).collect() } else { cfg.layers.clone() };
    if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::InvalidArgument(format!("probe layer {l} out of range ({n_layers} layers)")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let hooks = HookSet::new(layers);
    let target = resolve_target_dim(model, cfg)?;
    let max_len = model.config().max_seq_len;
    let before = model.forward_passes();
    let mut truncated = 0;
    let mut records = Vec::with_capacity(prompts.len() * hooks.layers().len() * cfg.submodules.len());
    for chunk in prompts.chunks(cfg.batch_size) {
        let batch: Vec<Vec<u32>> = chunk
            .iter()
            .map(|p| {
                let mut ids = vocab.encode_prompt(&p.text);
                if ids.len() > max_len {
                    log::warn!("prompt {} truncated from {} to {max_len} tokens", p.id, ids.len());
                    truncated += 1;
                    ids.truncate(max_len);
                }
                ids
            })
            .collect();
        let (_, captured) = model.forward_batch(&batch, Some(&hooks))?;
        for (p, triplets) in chunk.iter().zip(captured) {
            for trip in &triplets {
                for &sub in &cfg.submodules {
                    let act = trip.get(sub);
                    let pooled = pool_tokens(act)?;
                    records.push(ActivationRecord {
                        prompt_id: p.id.clone(),
                        subject: p.subject.clone(),
                        probe_type: p.probe_type,
                        layer: trip.layer,
                        submodule: sub,
                        raw_dim: pooled.len(),
                        vector: standardize_dim(&pooled, target, cfg.align)?,
                    });
                }
            }
        }
    }
    Ok(ProbeOutput { records, target_dim: target, forward_passes: model.forward_passes() - before, truncated })
}

const STORE_MAGIC: &[u8; 8] = b"UNLRNACT";
const FOOTER_MAGIC: &[u8; 8] = b"UNLRNIDX";
const STORE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    prompt_id: String,
    subject: String,
    probe_type: ProbeType,
    layer: usize,
    submodule: Submodule,
    raw_dim: usize,
    len: usize,
}

/// Append-only activation file.
///
/// ```text
/// "UNLRNACT" u32 version
/// block*   u32 meta length, meta JSON, f32 vector[len]
/// footer   index JSON {prompt_id: [offset, count]}, u64 index offset, "UNLRNIDX"
/// ```
///
/// Appending overwrites the old footer. A file without a valid footer (an
/// interrupted write) is recovered by scanning complete blocks.
pub struct ActivationStore {
    path: PathBuf,
    index: BTreeMap<String, (u64, usize)>,
    end: u64,
}

impl ActivationStore {
    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(STORE_MAGIC).map_err(|e| Error::io(path, e))?;
            f.write_all(&STORE_VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            let mut s = Self { path: path.to_path_buf(), index: BTreeMap::new(), end: 12 };
            s.write_footer()?;
            return Ok(s);
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..8] != STORE_MAGIC {
            return Err(Error::Format(format!("{}: not an activation store", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::Version { found: version, expected: STORE_VERSION });
        }
        if let Some((index, end)) = read_footer(&bytes) {
            return Ok(Self { path: path.to_path_buf(), index, end });
        }
        log::warn!("{}: footer missing, rebuilding index by scanning", path.display());
        let (index, end) = scan(&bytes);
        let mut s = Self { path: path.to_path_buf(), index, end };
        s.write_footer()?;
        Ok(s)
    }

    pub fn contains(&self, prompt_id: &str) -> bool {
        self.index.contains_key(prompt_id)
    }

    pub fn prompt_ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.index.values().map(|v| v.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Appends records grouped by prompt. Prompts already present are
    /// skipped, so re-running an interrupted probe is idempotent.
    pub fn append(&mut self, records: &[ActivationRecord]) -> Result<usize> {
        let mut groups: Vec<(&str, Vec<&ActivationRecord>)> = Vec::new();
        for r in records {
            if self.contains(&r.prompt_id) {
                continue;
            }
            match groups.last_mut() {
                Some((id, v)) if *id == r.prompt_id => v.push(r),
                _ => groups.push((&r.prompt_id, vec![r])),
            }
        }
        let mut seen = HashSet::new();
        if groups.iter().any(|(id, _)| !seen.insert(*id)) {
            return Err(Error::InvalidArgument("records of one prompt must be contiguous".into()));
        }
        let mut f = OpenOptions::new().write(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.set_len(self.end).map_err(|e| Error::io(&self.path, e))?;
        f.seek(SeekFrom::Start(self.end)).map_err(|e| Error::io(&self.path, e))?;
        let mut buf = Vec::new();
        let mut written = 0;
        for (id, recs) in groups {
            let offset = self.end + buf.len() as u64;
            for r in &recs {
                encode_block(&mut buf, r)?;
            }
            self.index.insert(id.to_string(), (offset, recs.len()));
            written += recs.len();
        }
        f.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.end += buf.len() as u64;
        drop(f);
        self.write_footer()?;
        Ok(written)
    }

    /// Every record in file order.
    pub fn read_all(&self) -> Result<Vec<ActivationRecord>> {
        let mut f = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut bytes = vec![0u8; self.end as usize];
        f.read_exact(&mut bytes).map_err(|e| Error::io(&self.path, e))?;
        let mut pos = 12;
        let mut out = Vec::with_capacity(self.len());
        while pos < bytes.len() {
            let (r, next) = decode_block(&bytes, pos)
                .ok_or_else(|| Error::Format(format!("{}: corrupt block at {pos}", self.path.display())))?;
            out.push(r);
            pos = next;
        }
        Ok(out)
    }

    /// Records of one prompt via the index.
    pub fn read_prompt(&self, prompt_id: &str) -> Result<Vec<ActivationRecord>> {
        let Some(&(offset, count)) = self.index.get(prompt_id) else { return Ok(Vec::new()) };
        let bytes = std::fs::read(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut pos = offset as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let (r, next) =
                decode_block(&bytes, pos).ok_or_else(|| Error::Format(format!("corrupt block at {pos}")))?;
            out.push(r);
            pos = next;
        }
        Ok(out)
    }

    /// Line-delimited JSON dump for debugging.
    pub fn export_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::write_jsonl(path, &self.read_all()?)
    }

    fn write_footer(&mut self) -> Result<()> {
        let mut f = OpenOptions::new().write(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.set_len(self.end).map_err(|e| Error::io(&self.path, e))?;
        f.seek(SeekFrom::Start(self.end)).map_err(|e| Error::io(&self.path, e))?;
        let mut buf = serde_json::to_vec(&self.index)?;
        buf.extend_from_slice(&self.end.to_le_bytes());
        buf.extend_from_slice(FOOTER_MAGIC);
        f.write_all(&buf).map_err(|e| Error::io(&self.path, e))
    }
}

fn encode_block(buf: &mut Vec<u8>, r: &ActivationRecord) -> Result<()> {
    let meta = serde_json::to_vec(&RecordMeta {
        prompt_id: r.prompt_id.clone(),
        subject: r.subject.clone(),
        probe_type: r.probe_type,
        layer: r.layer,
        submodule: r.submodule,
        raw_dim: r.raw_dim,
        len: r.vector.len(),
    })?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    for x in &r.vector {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

fn decode_block(bytes: &[u8], pos: usize) -> Option<(ActivationRecord, usize)> {
    let n = u32::from_le_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?) as usize;
    let meta: RecordMeta = serde_json::from_slice(bytes.get(pos + 4..pos + 4 + n)?).ok()?;
    let start = pos + 4 + n;
    let end = start + meta.len * 4;
    let data = bytes.get(start..end)?;
    let vector = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Some((
        ActivationRecord {
            prompt_id: meta.prompt_id,
            subject: meta.subject,
            probe_type: meta.probe_type,
            layer: meta.layer,
            submodule: meta.submodule,
            raw_dim: meta.raw_dim,
            vector,
        },
        end,
    ))
}

fn read_footer(bytes: &[u8]) -> Option<(BTreeMap<String, (u64, usize)>, u64)> {
    let n = bytes.len();
    if n < 12 + 16 || &bytes[n - 8..] != FOOTER_MAGIC {
        return None;
    }
    let end = u64::from_le_bytes(bytes[n - 16..n - 8].try_into().ok()?);
    if end < 12 || end as usize > n - 16 {
        return None;
    }
    let index = serde_json::from_slice(&bytes[end as usize..n - 16]).ok()?;
    Some((index, end))
}

/// Index of all complete blocks; stops at the first incomplete one.
fn scan(bytes: &[u8]) -> (BTreeMap<String, (u64, usize)>, u64) {
    let mut index: BTreeMap<String, (u64, usize)> = BTreeMap::new();
    let mut pos = 12;
    let mut last: Option<String> = None;
    while let Some((r, next)) = decode_block(bytes, pos) {
        if last.as_deref() == Some(r.prompt_id.as_str()) {
            index.get_mut(&r.prompt_id).unwrap().1 += 1;
        } else {
            index.insert(r.prompt_id.clone(), (pos as u64, 1));
            last = Some(r.prompt_id);
        }
        pos = next;
    }
    (index, pos as u64)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn same_width_is_identity(v in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            for mode in [AlignMode::Truncate, AlignMode::ZeroPad, AlignMode::Interpolate] {
                prop_assert_eq!(resize(&v, v.len(), mode).unwrap(), v.clone());
            }
        }

        #[test]
        fn pooling_ignores_token_order(rows in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 5), 1..8), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let t = rows.len();
            let a = Tensor::new(vec![t, 5], rows.concat()).unwrap();
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = Tensor::new(vec![t, 5], shuffled.concat()).unwrap();
            let (pa, pb) = (pool_tokens(&a).unwrap(), pool_tokens(&b).unwrap());
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
