// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformer with SwiGLU MLP blocks.
//!
//! Pre-norm blocks (RMS normalisation without gain), learned positional
//! embeddings, causal multi-head attention, an untied unembedding. Weights
//! are stored `(out × in)` and applied as `x · Wᵀ`.

pub mod adapter;
pub mod generate;
pub mod tokenizer;
pub mod train;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::{dot, sigmoid, Tensor};

pub use adapter::{AdapterConfig, AdapterState, Projection};
pub use generate::Generation;
pub use tokenizer::Vocab;

const NORM_EPS: f64 = 1e-6;
const PER_LAYER: usize = 10;
/// Adapter parameters are numbered from here so they never collide with base
/// parameter ids.
pub const ADAPTER_PARAM_BASE: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_mlp")]
    pub d_mlp: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "default_seq")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_layers() -> usize {
    4
}
fn default_d_model() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_d_mlp() -> usize {
    256
}
fn default_seq() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: default_layers(),
            d_model: default_d_model(),
            n_heads: default_heads(),
            d_mlp: default_d_mlp(),
            vocab_size: 0,
            max_seq_len: default_seq(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            errs.push(format!(
                "model: d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 4 {
            errs.push(format!("model: vocab_size {} < 4 reserved tokens", self.vocab_size));
        }
        if self.d_mlp == 0 {
            errs.push("model: d_mlp must be positive".into());
        }
        if self.max_seq_len < 2 {
            errs.push("model: max_seq_len must be at least 2".into());
        }
        errs
    }
}

/// MLP sub-module tap point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Submodule {
    Gate,
    Up,
    Down,
}

impl Submodule {
    pub const ALL: [Submodule; 3] = [Submodule::Gate, Submodule::Up, Submodule::Down];

    pub fn name(self) -> &'static str {
        match self {
            Submodule::Gate => "gate",
            Submodule::Up => "up",
            Submodule::Down => "down",
        }
    }
}

impl std::str::FromStr for Submodule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(Submodule::Gate),
            "up" => Ok(Submodule::Up),
            "down" => Ok(Submodule::Down),
            _ => Err(Error::InvalidArgument(format!("unknown submodule {s:?}"))),
        }
    }
}

/// Pre-activation gate and up projections (`T × d_mlp`) and the
/// down-projection output (`T × d_model`) of one block, post-bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTriplet {
    pub layer: usize,
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

impl MlpTriplet {
    pub fn get(&self, sub: Submodule) -> &Tensor {
        match sub {
            Submodule::Gate => &self.gate,
            Submodule::Up => &self.up,
            Submodule::Down => &self.down,
        }
    }
}

/// Layers whose MLP activations are captured during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HookSet {
    layers: Vec<usize>,
}

impl HookSet {
    pub fn new(mut layers: Vec<usize>) -> Self {
        layers.sort_unstable();
        layers.dedup();
        Self { layers }
    }

    pub fn all(n_layers: usize) -> Self {
        Self::new((0..n_layers).collect())
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }
}

/// Rank-one gated suppression installed on a block's MLP output.
///
/// For each position `t` the gate reads `z_t` from the running mean of the
/// block output over positions `0..=t`, so at the last prompt token it sees
/// the same pooled vector the signature was mined on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suppressor {
    pub tag: String,
    pub layer: usize,
    pub direction: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub k: f64,
    pub calib_mean: f64,
    pub calib_std: f64,
    pub gated: bool,
}

impl Suppressor {
    pub fn z(&self, h: &[f64]) -> f64 {
        (dot(h, &self.direction) - self.calib_mean) / self.calib_std
    }

    pub fn effective_alpha(&self, z: f64) -> f64 {
        if self.gated {
            self.alpha * sigmoid(self.k * (z - self.tau))
        } else {
            self.alpha
        }
    }

    /// Per-row coefficients for a `T × d` block of one sequence.
    fn coefficients(&self, rows: &Tensor) -> Vec<f64> {
        let d = rows.cols();
        let mut running = vec![0.0; d];
        (0..rows.rows())
            .map(|t| {
                for (r, x) in running.iter_mut().zip(rows.row(t)) {
                    *r += x;
                }
                let n = (t + 1) as f64;
                let pooled: Vec<f64> = running.iter().map(|r| r / n).collect();
                self.effective_alpha(self.z(&pooled))
            })
            .collect()
    }
}

/// Which base parameters receive gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BaseMode {
    Frozen,
    All,
    Only(Vec<usize>),
}

impl BaseMode {
    fn trains(&self, idx: usize) -> bool {
        match self {
            BaseMode::Frozen => false,
            BaseMode::All => true,
            BaseMode::Only(ids) => ids.contains(&idx),
        }
    }
}

/// How a forward pass is recorded on the tape.
pub struct ForwardCtx<'a> {
    pub base: BaseMode,
    pub adapter_grad: bool,
    /// Enables adapter dropout with this generator.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub hooks: Option<&'a HookSet>,
}

impl ForwardCtx<'_> {
    pub fn inference() -> Self {
        Self { base: BaseMode::Frozen, adapter_grad: false, dropout_rng: None, hooks: None }
    }
}

/// Result of a batched forward pass on a tape.
pub struct Forward {
    /// Stacked logits of every sequence, `(Σ Tᵢ) × vocab`.
    pub logits: Var,
    /// Row offset of each sequence in `logits`.
    pub offsets: Vec<usize>,
    pub captured: Vec<Vec<MlpTriplet>>,
}

pub struct ToyModel {
    config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    adapter: Option<AdapterState>,
    suppressors: Vec<Suppressor>,
    passes: AtomicUsize,
}

impl Clone for ToyModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            names: self.names.clone(),
            adapter: self.adapter.clone(),
            suppressors: self.suppressors.clone(),
            passes: AtomicUsize::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for ToyModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyModel")
            .field("config", &self.config)
            .field("adapter", &self.adapter.is_some())
            .field("suppressors", &self.suppressors.len())
            .finish()
    }
}

// Per-layer parameter slots.
const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;
const W_GATE: usize = 4;
const B_GATE: usize = 5;
const W_UP: usize = 6;
const B_UP: usize = 7;
const W_DOWN: usize = 8;
const B_DOWN: usize = 9;

fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, m, v) = (c.d_model, c.d_mlp, c.vocab_size);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![c.max_seq_len, d]),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("attn.q"), vec![d, d]),
            (p("attn.k"), vec![d, d]),
            (p("attn.v"), vec![d, d]),
            (p("attn.o"), vec![d, d]),
            (p("mlp.gate.weight"), vec![m, d]),
            (p("mlp.gate.bias"), vec![m]),
            (p("mlp.up.weight"), vec![m, d]),
            (p("mlp.up.bias"), vec![m]),
            (p("mlp.down.weight"), vec![d, m]),
            (p("mlp.down.bias"), vec![d]),
        ]);
    }
    out.push(("unembed".to_string(), vec![v, d]));
    out
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let out_scale = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (name, shape) in layout(&config) {
            let std = if name.ends_with("bias") {
                0.0
            } else if name.contains("emb") {
                0.1
            } else {
                let fan_in = shape[1] as f64;
                let s = 1.0 / fan_in.sqrt();
                if name.ends_with("attn.o") || name.contains("down") {
                    s * out_scale
                } else {
                    s
                }
            };
            let n: usize = shape.iter().product();
            let data = if std == 0.0 {
                vec![0.0; n]
            } else {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config,
            params,
            names,
            adapter: None,
            suppressors: Vec::new(),
            passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Index of a per-layer parameter slot.
    fn slot(&self, layer: usize, s: usize) -> usize {
        2 + layer * PER_LAYER + s
    }

    pub fn projection_index(&self, layer: usize, proj: Projection) -> usize {
        let s = match proj {
            Projection::Q => WQ,
            Projection::V => WV,
            Projection::O => WO,
        };
        self.slot(layer, s)
    }

    pub fn mlp_weight_index(&self, layer: usize, sub: Submodule) -> (usize, usize) {
        let (w, b) = match sub {
            Submodule::Gate => (W_GATE, B_GATE),
            Submodule::Up => (W_UP, B_UP),
            Submodule::Down => (W_DOWN, B_DOWN),
        };
        (self.slot(layer, w), self.slot(layer, b))
    }

    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn adapter(&self) -> Option<&AdapterState> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut AdapterState> {
        self.adapter.as_mut()
    }

    pub fn suppressors(&self) -> &[Suppressor] {
        &self.suppressors
    }

    pub fn install_suppressor(&mut self, s: Suppressor) -> Result<()> {
        if s.layer >= self.config.n_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {} out of range ({} layers)",
                s.layer, self.config.n_layers
            )));
        }
        if s.direction.len() != self.config.d_model {
            return Err(Error::Shape(format!(
                "suppressor direction has {} entries, model width is {}",
                s.direction.len(),
                self.config.d_model
            )));
        }
        if !(s.calib_std > 0.0) {
            return Err(Error::InvalidArgument("calib_std must be positive".into()));
        }
        if self.suppressors.iter().any(|o| o.layer == s.layer && o.tag == s.tag) {
            return Err(Error::DoubleInstall { subject: s.tag, layer: s.layer });
        }
        self.suppressors.push(s);
        Ok(())
    }

    /// Removes the suppressor `tag` from `layer`; returns whether one was there.
    pub fn remove_suppressor(&mut self, tag: &str, layer: usize) -> bool {
        let before = self.suppressors.len();
        self.suppressors.retain(|s| !(s.tag == tag && s.layer == layer));
        before != self.suppressors.len()
    }

    /// Removes every suppressor with this tag; returns how many were removed.
    pub fn remove_suppressors(&mut self, tag: &str) -> usize {
        let before = self.suppressors.len();
        self.suppressors.retain(|s| s.tag != tag);
        before - self.suppressors.len()
    }

    pub fn remove_all_suppressors(&mut self) -> usize {
        let n = self.suppressors.len();
        self.suppressors.clear();
        n
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn base_var(&self, g: &mut Graph, idx: usize, base: &BaseMode) -> Var {
        if base.trains(idx) {
            g.param(ParamId(idx), &self.params[idx])
        } else {
            g.constant(self.params[idx].clone())
        }
    }

    /// `x · Wᵀ`, plus the scaled low-rank path when an enabled adapter
    /// targets this projection.
    fn project(
        &self,
        g: &mut Graph,
        x: Var,
        layer: usize,
        proj: Projection,
        ctx: &mut ForwardCtx<'_>,
    ) -> Var {
        let idx = self.projection_index(layer, proj);
        let w = self.base_var(g, idx, &ctx.base);
        let y = g.matmul_t(x, w);
        let Some(ad) = self.adapter.as_ref().filter(|a| a.enabled && a.targets(proj)) else { return y };
        let (ia, ib) = ad.param_ids(layer, proj);
        let pair = ad.pair(layer, proj);
        let (a, b) = if ctx.adapter_grad {
            (g.param(ia, &pair.a), g.param(ib, &pair.b))
        } else {
            (g.constant(pair.a.clone()), g.constant(pair.b.clone()))
        };
        let mut xin = x;
        if let Some(rng) = ctx.dropout_rng.as_deref_mut() {
            if ad.config.dropout > 0.0 {
                let shape = g.value(x).shape().to_vec();
                let keep = 1.0 - ad.config.dropout;
                let mask: Vec<f64> = (0..g.value(x).len())
                    .map(|_| if rand::Rng::random::<f64>(rng) < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = g.constant(Tensor::new(shape, mask).expect("mask shape"));
                xin = g.mul(x, m);
            }
        }
        let h = g.matmul_t(xin, a);
        let delta = g.matmul_t(h, b);
        let delta = g.scale(delta, ad.config.scale());
        g.add(y, delta)
    }

    /// Records a batched forward pass on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        batch: &[Vec<u32>],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for seq in batch {
            self.check_tokens(seq)?;
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        let c = &self.config;
        let mut offsets = Vec::with_capacity(batch.len());
        let mut tok_idx = Vec::new();
        let mut pos_idx = Vec::new();
        for seq in batch {
            offsets.push(tok_idx.len());
            tok_idx.extend(seq.iter().map(|&t| t as usize));
            pos_idx.extend(0..seq.len());
        }
        let lens: Vec<usize> = batch.iter().map(Vec::len).collect();

        let tok = self.base_var(g, 0, &ctx.base);
        let pos = self.base_var(g, 1, &ctx.base);
        let te = g.gather_rows(tok, &tok_idx);
        let pe = g.gather_rows(pos, &pos_idx);
        let mut x = g.add(te, pe);

        let mut captured = vec![Vec::new(); batch.len()];
        let dh = c.d_model / c.n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..c.n_layers {
            // Attention.
            let hn = g.rms_norm(x, NORM_EPS);
            let q = self.project(g, hn, l, Projection::Q, ctx);
            let wk = self.base_var(g, self.slot(l, WK), &ctx.base);
            let k = g.matmul_t(hn, wk);
            let v = self.project(g, hn, l, Projection::V, ctx);
            let mut segs = Vec::with_capacity(batch.len());
            for (&off, &len) in offsets.iter().zip(&lens) {
                let (qs, ks, vs) = if batch.len() == 1 {
                    (q, k, v)
                } else {
                    (g.slice_rows(q, off, len), g.slice_rows(k, off, len), g.slice_rows(v, off, len))
                };
                let mut heads = Vec::with_capacity(c.n_heads);
                for h in 0..c.n_heads {
                    let qh = g.slice_cols(qs, h * dh, dh);
                    let kh = g.slice_cols(ks, h * dh, dh);
                    let vh = g.slice_cols(vs, h * dh, dh);
                    let scores = g.matmul_t(qh, kh);
                    let scores = g.scale(scores, inv_sqrt);
                    let attn = g.causal_softmax(scores);
                    heads.push(g.matmul(attn, vh));
                }
                segs.push(g.concat_cols(&heads));
            }
            let attn = if segs.len() == 1 { segs[0] } else { g.concat_rows(&segs) };
            let o = self.project(g, attn, l, Projection::O, ctx);
            x = g.add(x, o);

            // SwiGLU MLP.
            let hn = g.rms_norm(x, NORM_EPS);
            let (gate, up, down) = self.mlp_graph(g, hn, l, &ctx.base);
            if ctx.hooks.is_some_and(|h| h.contains(l)) {
                let (gv, uv, dv) = (g.value(gate), g.value(up), g.value(down));
                for (i, (&off, &len)) in offsets.iter().zip(&lens).enumerate() {
                    captured[i].push(MlpTriplet {
                        layer: l,
                        gate: rows_of(gv, off, len),
                        up: rows_of(uv, off, len),
                        down: rows_of(dv, off, len),
                    });
                }
            }
            let mut y = down;
            for s in self.suppressors.iter().filter(|s| s.layer == l) {
                let dv = g.value(y);
                let mut coef = Vec::with_capacity(dv.rows());
                for (&off, &len) in offsets.iter().zip(&lens) {
                    coef.extend(s.coefficients(&rows_of(dv, off, len)));
                }
                y = g.rank_one(y, &s.direction, &coef);
            }
            x = g.add(x, y);
        }
        let hn = g.rms_norm(x, NORM_EPS);
        let un = self.base_var(g, self.params.len() - 1, &ctx.base);
        let logits = g.matmul_t(hn, un);
        Ok(Forward { logits, offsets, captured })
    }

    fn mlp_graph(&self, g: &mut Graph, x: Var, l: usize, base: &BaseMode) -> (Var, Var, Var) {
        let lin = |g: &mut Graph, x: Var, w: usize, b: usize| {
            let wv = self.base_var(g, self.slot(l, w), base);
            let bv = self.base_var(g, self.slot(l, b), base);
            let y = g.matmul_t(x, wv);
            g.add_row(y, bv)
        };
        let gate = lin(g, x, W_GATE, B_GATE);
        let up = lin(g, x, W_UP, B_UP);
        let act = g.silu(gate);
        let hidden = g.mul(act, up);
        let down = lin(g, hidden, W_DOWN, B_DOWN);
        (gate, up, down)
    }

    /// MLP of block `layer` applied to already-normalised rows.
    pub fn mlp(&self, layer: usize, x: &Tensor) -> Result<MlpTriplet> {
        if layer >= self.config.n_layers || x.cols() != self.config.d_model {
            return Err(Error::Shape(format!("mlp input {:?} for layer {layer}", x.shape())));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (gate, up, down) = self.mlp_graph(&mut g, xv, layer, &BaseMode::Frozen);
        Ok(MlpTriplet {
            layer,
            gate: g.value(gate).clone(),
            up: g.value(up).clone(),
            down: g.value(down).clone(),
        })
    }

    /// Logits (`T × vocab`) and the triplets of every hooked layer.
    pub fn forward(&self, tokens: &[u32], hooks: Option<&HookSet>) -> Result<(Tensor, Vec<MlpTriplet>)> {
        let (mut logits, mut caps) = self.forward_batch(std::slice::from_ref(&tokens.to_vec()), hooks)?;
        Ok((logits.pop().unwrap(), caps.pop().unwrap()))
    }

    /// One forward pass over a whole batch.
    pub fn forward_batch(
        &self,
        batch: &[Vec<u32>],
        hooks: Option<&HookSet>,
    ) -> Result<(Vec<Tensor>, Vec<Vec<MlpTriplet>>)> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx { hooks, ..ForwardCtx::inference() };
        let f = self.forward_graph(&mut g, batch, &mut ctx)?;
        let lv = g.value(f.logits);
        let logits = f
            .offsets
            .iter()
            .zip(batch)
            .map(|(&off, s)| rows_of(lv, off, s.len()))
            .collect();
        Ok((logits, f.captured))
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(self.forward(tokens, None)?.0)
    }

    /// Attaches an adapter; fails on dimension mismatch.
    pub fn attach_adapter(&mut self, state: AdapterState) -> Result<()> {
        state.check_dims(&self.config)?;
        self.adapter = Some(state);
        Ok(())
    }

    pub fn detach_adapter(&mut self) -> Option<AdapterState> {
        self.adapter.take()
    }

    /// Folds `scale · B · A` into the base projections permanently.
    pub fn merge_adapter(&mut self, state: &AdapterState) -> Result<()> {
        state.check_dims(&self.config)?;
        let s = state.config.scale();
        for l in 0..self.config.n_layers {
            for proj in state.config.targets.clone() {
                let pair = state.pair(l, proj);
                let delta = pair.b.matmul(&pair.a)?;
                let idx = self.projection_index(l, proj);
                for (w, d) in self.params[idx].data_mut().iter_mut().zip(delta.data()) {
                    *w += s * d;
                }
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container {
            kind: "model".into(),
            config: serde_json::to_string(&self.config)?,
            blobs: self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "model" {
            return Err(Error::Format(format!("expected a model checkpoint, found {:?}", c.kind)));
        }
        let config: ModelConfig = serde_json::from_str(&c.config)?;
        let mut model = Self::new(config)?;
        for (i, name) in model.names.clone().iter().enumerate() {
            let t = c.blob(name)?;
            if t.shape() != model.params[i].shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params[i].shape()
                )));
            }
            model.params[i] = t.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn rows_of(t: &Tensor, start: usize, len: usize) -> Tensor {
    let n = t.cols();
    Tensor::new(vec![len, n], t.data()[start * n..(start + len) * n].to_vec()).expect("row slice")
}
