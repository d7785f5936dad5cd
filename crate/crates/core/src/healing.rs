// SPDX-License-Identifier: MIT OR Apache-2.0

//! Capsule-trigger logging and adapter training against the composite
//! preference / unlikelihood / anchor objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, Var};
use crate::capsule::Capsule;
use crate::error::{Error, Result};
use crate::model::train::{clip_global_norm, lr_at, Adam};
use crate::model::{BaseMode, ForwardCtx, HookSet, Projection, ToyModel};
use crate::parallel::par_map;
use crate::tensor::{softmax, Tensor};

/// Probability ceiling inside both unlikelihood logs.
pub const PROB_CLAMP: f64 = 1.0 - 1e-6;
pub const MAX_NAME_TOKENS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub prompt_id: String,
    pub x: Vec<u32>,
    /// Preferred continuation (suppressed / refusal).
    pub y_plus: Vec<u32>,
    /// Rejected continuation (the unsuppressed answer).
    pub y_minus: Vec<u32>,
    pub trigger_z: f64,
    pub layer: usize,
    #[serde(default)]
    pub x_text: String,
    #[serde(default)]
    pub y_plus_text: String,
    #[serde(default)]
    pub y_minus_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta: f64,
    pub w: f64,
    pub lambda_ul: f64,
    pub lambda_ntul: f64,
    pub lambda_kl: f64,
    pub lambda_ewc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 0.02, w: 1.0, lambda_ul: 0.03, lambda_ntul: 0.02, lambda_kl: 0.03, lambda_ewc: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("beta", self.beta),
            ("w", self.w),
            ("lambda_ul", self.lambda_ul),
            ("lambda_ntul", self.lambda_ntul),
            ("lambda_kl", self.lambda_kl),
            ("lambda_ewc", self.lambda_ewc),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                errs.push(format!("heal.weights.{name} must be a non-negative number (got {v})"));
            }
        }
        errs
    }
}

/// One anchored parameter: a base weight matrix and its per-entry Fisher
/// weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherEntry {
    pub layer: usize,
    pub projection: Projection,
    pub weights: Tensor,
    pub anchor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    pub entries: Vec<FisherEntry>,
    pub pool_size: usize,
}

impl FisherDiagonal {
    /// Mean squared gradient of each pool sequence's mean token
    /// log-likelihood, for every adapter-targeted projection. Anchors are
    /// the current base weights.
    pub fn estimate(model: &ToyModel, pool: &[Vec<u32>], targets: &[Projection]) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidArgument("Fisher pool is empty".into()));
        }
        let mut slots = Vec::new();
        for l in 0..model.config().n_layers {
            for &p in targets {
                slots.push((l, p, model.projection_index(l, p)));
            }
        }
        let ids: Vec<usize> = slots.iter().map(|s| s.2).collect();
        let mut sums: Vec<Tensor> = ids.iter().map(|&i| Tensor::zeros(model.params()[i].shape())).collect();
        let mut plain = model.clone();
        plain.detach_adapter();
        plain.remove_all_suppressors();
        let mut g = Graph::new();
        for seq in pool {
            g.reset();
            let mut ctx = ForwardCtx { base: BaseMode::Only(ids.clone()), ..ForwardCtx::inference() };
            let nll = crate::model::train::batch_nll(&mut g, &plain, std::slice::from_ref(seq), &mut ctx)?;
            let grads = g.backward(nll)?;
            for (acc, &i) in sums.iter_mut().zip(&ids) {
                for (a, x) in acc.data_mut().iter_mut().zip(grads[&ParamId(i)].data()) {
                    *a += x * x;
                }
            }
        }
        let n = pool.len() as f64;
        let entries = slots
            .iter()
            .zip(sums)
            .map(|(&(layer, projection, i), s)| FisherEntry {
                layer,
                projection,
                weights: s.map(|x| x / n),
                anchor: model.params()[i].clone(),
            })
            .collect();
        Ok(Self { entries, pool_size: pool.len() })
    }
}

fn join(x: &[u32], y: &[u32]) -> Vec<u32> {
    let mut s = x.to_vec();
    s.extend_from_slice(y);
    s
}

fn check_pair(x: &[u32], y: &[u32], what: &str) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: empty prompt")));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: empty continuation")));
    }
    Ok(())
}

/// Policy log-softmax of a batch as a flat vector, plus row offsets.
fn scored(g: &mut Graph, model: &ToyModel, batch: &[Vec<u32>], ctx: &mut ForwardCtx<'_>) -> Result<(Var, Vec<usize>)> {
    let f = model.forward_graph(g, batch, ctx)?;
    let lp = g.log_softmax(f.logits);
    let n = g.value(lp).len();
    Ok((g.reshape(lp, vec![n]), f.offsets))
}

/// Flat indices of `log p(y_t | x, y_<t)` for a sequence stored at `off`.
fn continuation_index(off: usize, x_len: usize, y: &[u32], vocab: usize) -> Vec<usize> {
    y.iter().enumerate().map(|(t, &tok)| (off + x_len - 1 + t) * vocab + tok as usize).collect()
}

/// `Σ_t log p(y_t | x, y_<t)` for each `(x, y)` in one forward pass.
pub fn sequence_logprobs(
    g: &mut Graph,
    model: &ToyModel,
    pairs: &[(&[u32], &[u32])],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Vec<Var>> {
    for (x, y) in pairs {
        check_pair(x, y, "sequence log-probability")?;
    }
    let batch: Vec<Vec<u32>> = pairs.iter().map(|(x, y)| join(x, y)).collect();
    let (flat, offs) = scored(g, model, &batch, ctx)?;
    let v = model.config().vocab_size;
    Ok(pairs
        .iter()
        .zip(offs)
        .map(|((x, y), off)| {
            let picked = g.select(flat, &continuation_index(off, x.len(), y, v));
            g.sum(picked)
        })
        .collect())
}

/// Reference-side sequence log-probabilities, `(log p(y⁺|x), log p(y⁻|x))`.
pub fn reference_logprobs(reference: &ToyModel, t: &PreferenceTuple) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let lp = sequence_logprobs(
        &mut g,
        reference,
        &[(&t.x, &t.y_plus), (&t.x, &t.y_minus)],
        &mut ForwardCtx::inference(),
    )?;
    Ok((g.value(lp[0]).item(), g.value(lp[1]).item()))
}

/// Mean over tuples of `−w log σ(β(Δ⁺ − Δ⁻))`; `refs[i]` holds the
/// reference log-probabilities of tuple `i`.
pub fn dpo_term(
    g: &mut Graph,
    policy: &ToyModel,
    tuples: &[&PreferenceTuple],
    refs: &[(f64, f64)],
    weights: &LossWeights,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    if tuples.is_empty() || tuples.len() != refs.len() {
        return Err(Error::InvalidArgument("dpo needs one reference pair per tuple".into()));
    }
    let mut pairs: Vec<(&[u32], &[u32])> = tuples.iter().map(|t| (&t.x[..], &t.y_plus[..])).collect();
    pairs.extend(tuples.iter().map(|t| (&t.x[..], &t.y_minus[..])));
    let lps = sequence_logprobs(g, policy, &pairs, ctx)?;
    let n = tuples.len();
    let mut terms = Vec::with_capacity(n);
    for (i, &(rp, rm)) in refs.iter().enumerate() {
        let d = g.sub(lps[i], lps[n + i]);
        let d = g.add_scalar(d, -(rp - rm));
        let m = g.scale(d, weights.beta);
        let ls = g.log_sigmoid(m);
        terms.push(g.scale(ls, -weights.w));
    }
    Ok(mean_of(g, &terms))
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// `−mean_t log(1 − min(p, 1−1e-6))` over picked log-probabilities.
fn unlikely(g: &mut Graph, logp: Var) -> Var {
    let p = g.exp(logp);
    let p = g.clamp_max(p, PROB_CLAMP);
    let q = g.one_minus(p);
    let l = g.log(q);
    let m = g.mean(l);
    g.scale(m, -1.0)
}

/// Token-level unlikelihood of each `y⁻` given `x`, averaged over pairs.
pub fn unlikelihood_term(
    g: &mut Graph,
    policy: &ToyModel,
    pairs: &[(&[u32], &[u32])],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("unlikelihood needs at least one pair".into()));
    }
    for (x, y) in pairs {
        check_pair(x, y, "unlikelihood")?;
    }
    let batch: Vec<Vec<u32>> = pairs.iter().map(|(x, y)| join(x, y)).collect();
    let (flat, offs) = scored(g, policy, &batch, ctx)?;
    let v = policy.config().vocab_size;
    let terms: Vec<Var> = pairs
        .iter()
        .zip(offs)
        .map(|((x, y), off)| {
            let picked = g.select(flat, &continuation_index(off, x.len(), y, v));
            unlikely(g, picked)
        })
        .collect();
    Ok(mean_of(g, &terms))
}

/// Unlikelihood of the aggregate name-token mass at each step of `y⁺`,
/// averaged over pairs.
pub fn name_unlikelihood_term(
    g: &mut Graph,
    policy: &ToyModel,
    pairs: &[(&[u32], &[u32])],
    names: &[u32],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let mut names = names.to_vec();
    names.sort_unstable();
    names.dedup();
    if names.len() > MAX_NAME_TOKENS {
        return Err(Error::InvalidArgument(format!(
            "name-token set has {} entries, at most {MAX_NAME_TOKENS} allowed",
            names.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("name unlikelihood needs at least one pair".into()));
    }
    if names.is_empty() {
        log::warn!("empty name-token set; name unlikelihood is zero");
        return Ok(g.scalar(0.0));
    }
    for (x, y) in pairs {
        check_pair(x, y, "name unlikelihood")?;
    }
    let batch: Vec<Vec<u32>> = pairs.iter().map(|(x, y)| join(x, y)).collect();
    let (flat, offs) = scored(g, policy, &batch, ctx)?;
    let v = policy.config().vocab_size;
    let k = names.len();
    let ones = g.constant(Tensor::full(&[k, 1], 1.0));
    let mut terms = Vec::with_capacity(pairs.len());
    for ((x, y), off) in pairs.iter().zip(offs) {
        let mut idx = Vec::with_capacity(y.len() * k);
        for t in 0..y.len() {
            let row = off + x.len() - 1 + t;
            idx.extend(names.iter().map(|&n| row * v + n as usize));
        }
        let lp = g.select(flat, &idx);
        let p = g.exp(lp);
        let p = g.reshape(p, vec![y.len(), k]);
        let mass = g.matmul(p, ones);
        let mass = g.clamp_max(mass, PROB_CLAMP);
        let q = g.one_minus(mass);
        let l = g.log(q);
        let m = g.mean(l);
        terms.push(g.scale(m, -1.0));
    }
    Ok(mean_of(g, &terms))
}

/// Reference next-token distributions of one anchor sequence.
#[derive(Debug, Clone)]
pub struct AnchorRef {
    pub tokens: Vec<u32>,
    probs: Tensor,
    /// `Σ p log p` over every row.
    neg_entropy: f64,
}

impl AnchorRef {
    pub fn new(reference: &ToyModel, tokens: &[u32]) -> Result<Self> {
        let logits = reference.logits(tokens)?;
        let mut data = Vec::with_capacity(logits.len());
        let mut ne = 0.0;
        for r in 0..logits.rows() {
            let p = softmax(logits.row(r));
            ne += p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            data.extend(p);
        }
        Ok(Self { tokens: tokens.to_vec(), probs: Tensor::new(logits.shape().to_vec(), data)?, neg_entropy: ne })
    }
}

/// Mean over anchor positions of `KL(p_ref ‖ p_policy)`.
pub fn kl_term(g: &mut Graph, policy: &ToyModel, anchors: &[&AnchorRef], ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("KL anchor needs at least one prompt".into()));
    }
    let batch: Vec<Vec<u32>> = anchors.iter().map(|a| a.tokens.clone()).collect();
    let f = policy.forward_graph(g, &batch, ctx)?;
    let lp = g.log_softmax(f.logits);
    let rows: usize = batch.iter().map(Vec::len).sum();
    let v = policy.config().vocab_size;
    let mut p = Vec::with_capacity(rows * v);
    let mut ne = 0.0;
    for a in anchors {
        p.extend_from_slice(a.probs.data());
        ne += a.neg_entropy;
    }
    let pc = g.constant(Tensor::new(vec![rows, v], p)?);
    let cross = g.mul(pc, lp);
    let s = g.sum(cross);
    let s = g.scale(s, -1.0 / rows as f64);
    Ok(g.add_scalar(s, ne / rows as f64))
}

/// `½ Σ F (θ − θ*)²` with `θ` the effective (base plus adapter) weights of
/// every anchored projection.
pub fn ewc_term(g: &mut Graph, policy: &ToyModel, fisher: &FisherDiagonal, ctx: &ForwardCtx<'_>) -> Result<Var> {
    let mut parts = Vec::with_capacity(fisher.entries.len());
    for e in &fisher.entries {
        let theta = effective_weight(g, policy, e.layer, e.projection, ctx)?;
        if g.value(theta).shape() != e.anchor.shape() || e.weights.shape() != e.anchor.shape() {
            return Err(Error::Shape(format!(
                "Fisher entry for layer {} {:?} does not match the model",
                e.layer, e.projection
            )));
        }
        parts.push(ewc_part(g, theta, e));
    }
    if parts.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    Ok(g.scale(acc, 0.5))
}

/// `Σ F (θ − θ*)²` for one entry.
pub fn ewc_part(g: &mut Graph, theta: Var, e: &FisherEntry) -> Var {
    let anchor = g.constant(e.anchor.clone());
    let d = g.sub(theta, anchor);
    let d2 = g.square(d);
    let f = g.constant(e.weights.clone());
    let w = g.mul(d2, f);
    g.sum(w)
}

fn effective_weight(g: &mut Graph, policy: &ToyModel, layer: usize, proj: Projection, ctx: &ForwardCtx<'_>) -> Result<Var> {
    if layer >= policy.config().n_layers {
        return Err(Error::Shape(format!("Fisher entry for layer {layer} beyond the model")));
    }
    let w = g.constant(policy.params()[policy.projection_index(layer, proj)].clone());
    let Some(ad) = policy.adapter().filter(|a| a.enabled && a.targets(proj)) else { return Ok(w) };
    let (ia, ib) = ad.param_ids(layer, proj);
    let pair = ad.pair(layer, proj);
    let (a, b) = if ctx.adapter_grad {
        (g.param(ia, &pair.a), g.param(ib, &pair.b))
    } else {
        (g.constant(pair.a.clone()), g.constant(pair.b.clone()))
    };
    let ba = g.matmul(b, a);
    let ba = g.scale(ba, ad.config.scale());
    Ok(g.add(w, ba))
}

fn scalar_eval(f: impl FnOnce(&mut Graph, &mut ForwardCtx<'_>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::inference();
    let v = f(&mut g, &mut ctx)?;
    Ok(g.value(v).item())
}

pub fn dpo_loss(policy: &ToyModel, reference: &ToyModel, t: &PreferenceTuple, beta: f64, w: f64) -> Result<f64> {
    let r = reference_logprobs(reference, t)?;
    let weights = LossWeights { beta, w, ..LossWeights::default() };
    scalar_eval(|g, ctx| dpo_term(g, policy, &[t], &[r], &weights, ctx))
}

pub fn unlikelihood_loss(policy: &ToyModel, x: &[u32], y_minus: &[u32]) -> Result<f64> {
    scalar_eval(|g, ctx| unlikelihood_term(g, policy, &[(x, y_minus)], ctx))
}

pub fn name_token_unlikelihood(policy: &ToyModel, x: &[u32], y_plus: &[u32], names: &[u32]) -> Result<f64> {
    scalar_eval(|g, ctx| name_unlikelihood_term(g, policy, &[(x, y_plus)], names, ctx))
}

pub fn kl_anchor_loss(policy: &ToyModel, reference: &ToyModel, prompts: &[Vec<u32>]) -> Result<f64> {
    let refs = prompts.iter().map(|p| AnchorRef::new(reference, p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&AnchorRef> = refs.iter().collect();
    scalar_eval(|g, ctx| kl_term(g, policy, &refs, ctx))
}

pub fn ewc_loss(policy: &ToyModel, fisher: &FisherDiagonal) -> Result<f64> {
    scalar_eval(|g, ctx| ewc_term(g, policy, fisher, ctx))
}

/// Peak capsule z over every position and target layer of `x`, computed on
/// the unsuppressed model. Returns `(z, layer)`.
pub fn peak_trigger(model: &ToyModel, capsule: &Capsule, x: &[u32]) -> Result<(f64, usize)> {
    let hooks = HookSet::new(capsule.target_layers.clone());
    let (_, caps) = model.forward(x, Some(&hooks))?;
    let mut best = (f64::NEG_INFINITY, capsule.target_layers.first().copied().unwrap_or(0));
    for c in &caps {
        let rows = &c.down;
        let mut running = vec![0.0; rows.cols()];
        for t in 0..rows.rows() {
            for (r, v) in running.iter_mut().zip(rows.row(t)) {
                *r += v;
            }
            let pooled: Vec<f64> = running.iter().map(|r| r / (t + 1) as f64).collect();
            let z = capsule.z(&pooled);
            if z > best.0 {
                best = (z, c.layer);
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub max_new: usize,
    pub workers: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { max_new: 24, workers: 1 }
    }
}

/// Runs every prompt with and without the capsules and logs a tuple for
/// each prompt where some capsule's peak z exceeds its threshold. When the
/// suppressed output still names the subject, the refusal stands in for
/// `y⁺`. Tuples whose two sides agree are skipped.
pub fn collect_tuples(
    model: &ToyModel,
    capsules: &[Capsule],
    prompts: &[(String, Vec<u32>)],
    refusal: &[u32],
    names: &[u32],
    cfg: &CollectConfig,
) -> Result<Vec<PreferenceTuple>> {
    if refusal.is_empty() {
        return Err(Error::InvalidArgument("refusal continuation is empty".into()));
    }
    if capsules.is_empty() {
        return Err(Error::InvalidArgument("no capsules to collect with".into()));
    }
    let mut base = model.clone();
    base.remove_all_suppressors();
    let mut on = base.clone();
    for c in capsules {
        c.install(&mut on)?;
    }
    let max_len = model.config().max_seq_len;
    let results = par_map(prompts, cfg.workers, |(id, x)| -> Result<Option<PreferenceTuple>> {
        let mut fired: Option<(f64, f64, usize)> = None;
        for c in capsules {
            let (z, layer) = peak_trigger(&base, c, x)?;
            if z > c.tau && fired.is_none_or(|(m, _, _)| z - c.tau > m) {
                fired = Some((z - c.tau, z, layer));
            }
        }
        let Some((_, z, layer)) = fired else { return Ok(None) };
        let y_minus = base.generate(x, cfg.max_new, &[])?.tokens;
        let mut y_plus = on.generate(x, cfg.max_new, &[])?.tokens;
        if y_plus.is_empty() || y_plus.iter().any(|t| names.contains(t)) {
            y_plus = refusal[..refusal.len().min(max_len.saturating_sub(x.len()))].to_vec();
        }
        if y_minus.is_empty() || y_plus.is_empty() {
            log::warn!("prompt {id}: empty continuation, skipped");
            return Ok(None);
        }
        if y_plus == y_minus {
            log::debug!("prompt {id}: capsule-on and capsule-off outputs agree, skipped");
            return Ok(None);
        }
        Ok(Some(PreferenceTuple {
            prompt_id: id.clone(),
            x: x.clone(),
            y_plus,
            y_minus,
            trigger_z: z,
            layer,
            x_text: String::new(),
            y_plus_text: String::new(),
            y_minus_text: String::new(),
        }))
    });
    let mut out = Vec::new();
    for r in results {
        if let Some(t) = r? {
            out.push(t);
        }
    }
    let fired = out.len();
    if fired == 0 {
        return Err(Error::NoTriggers { prompts: prompts.len() });
    }
    log::info!("{fired} preference tuples from {} prompts", prompts.len());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HealConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub anchor_batch: usize,
    pub warmup: usize,
    pub clip: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for HealConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 5e-3,
            batch_size: 8,
            anchor_batch: 8,
            warmup: 10,
            clip: 1.0,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl HealConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.weights.validate();
        if self.batch_size == 0 {
            errs.push("heal.batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) {
            errs.push(format!("heal.lr must be non-negative (got {})", self.lr));
        }
        if !(self.clip > 0.0) {
            errs.push(format!("heal.clip must be positive (got {})", self.clip));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub dpo: f64,
    pub ul: f64,
    pub ntul: f64,
    pub kl: f64,
    pub ewc: f64,
    pub total: f64,
}

/// Cycles through shuffled epochs of `0..n`.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), cursor: n }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let k = k.min(self.order.len());
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Trains the attached adapter on `tuples` with base weights frozen. The
/// reference is the model with its adapter disabled, snapshotted before the
/// first step. Returns the per-step loss trace.
pub fn heal(
    model: &mut ToyModel,
    tuples: &[PreferenceTuple],
    anchors: &[Vec<u32>],
    names: &[u32],
    fisher: Option<&FisherDiagonal>,
    cfg: &HealConfig,
) -> Result<Vec<LossRecord>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if model.adapter().is_none() {
        return Err(Error::InvalidArgument("heal needs an attached adapter".into()));
    }
    if tuples.is_empty() {
        return Err(Error::InvalidArgument("heal needs at least one preference tuple".into()));
    }
    let w = cfg.weights;
    if w.lambda_kl > 0.0 && anchors.is_empty() {
        return Err(Error::InvalidArgument("KL anchor weight is set but the anchor pool is empty".into()));
    }
    let mut reference = model.clone();
    reference.detach_adapter();
    let refs = tuples.iter().map(|t| reference_logprobs(&reference, t)).collect::<Result<Vec<_>>>()?;
    let anchor_refs = if w.lambda_kl > 0.0 {
        anchors.iter().map(|a| AnchorRef::new(&reference, a)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f);
    let mut tuple_sampler = Sampler::new(tuples.len());
    let mut anchor_sampler = Sampler::new(anchor_refs.len());
    let mut adam = Adam::default();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut g = Graph::new();
    for step in 0..cfg.steps {
        let pick = tuple_sampler.take(cfg.batch_size, &mut rng);
        let batch: Vec<&PreferenceTuple> = pick.iter().map(|&i| &tuples[i]).collect();
        let batch_refs: Vec<(f64, f64)> = pick.iter().map(|&i| refs[i]).collect();
        g.reset();
        let mut ctx = ForwardCtx {
            base: BaseMode::Frozen,
            adapter_grad: true,
            dropout_rng: Some(&mut drop_rng),
            hooks: None,
        };
        let mut record = LossRecord { step, dpo: 0.0, ul: 0.0, ntul: 0.0, kl: 0.0, ewc: 0.0, total: 0.0 };
        let mut parts: Vec<Var> = Vec::new();

        let dpo = dpo_term(&mut g, model, &batch, &batch_refs, &w, &mut ctx)?;
        record.dpo = finite(g.value(dpo).item(), "dpo", step)?;
        parts.push(dpo);
        if w.lambda_ul > 0.0 {
            let pairs: Vec<(&[u32], &[u32])> = batch.iter().map(|t| (&t.x[..], &t.y_minus[..])).collect();
            let v = unlikelihood_term(&mut g, model, &pairs, &mut ctx)?;
            record.ul = finite(g.value(v).item(), "unlikelihood", step)?;
            parts.push(g.scale(v, w.lambda_ul));
        }
        if w.lambda_ntul > 0.0 {
            let pairs: Vec<(&[u32], &[u32])> = batch.iter().map(|t| (&t.x[..], &t.y_plus[..])).collect();
            let v = name_unlikelihood_term(&mut g, model, &pairs, names, &mut ctx)?;
            record.ntul = finite(g.value(v).item(), "name_unlikelihood", step)?;
            parts.push(g.scale(v, w.lambda_ntul));
        }
        if w.lambda_kl > 0.0 {
            let ids = anchor_sampler.take(cfg.anchor_batch, &mut rng);
            let chosen: Vec<&AnchorRef> = ids.iter().map(|&i| &anchor_refs[i]).collect();
            let v = kl_term(&mut g, model, &chosen, &mut ctx)?;
            record.kl = finite(g.value(v).item(), "kl", step)?;
            parts.push(g.scale(v, w.lambda_kl));
        }
        if let Some(f) = fisher.filter(|_| w.lambda_ewc > 0.0) {
            let v = ewc_term(&mut g, model, f, &ctx)?;
            record.ewc = finite(g.value(v).item(), "ewc", step)?;
            parts.push(g.scale(v, w.lambda_ewc));
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p);
        }
        record.total = finite(g.value(total).item(), "total", step)?;
        let mut grads = g.backward(total)?;
        grads.retain(|id, _| id.0 >= crate::model::ADAPTER_PARAM_BASE);
        clip_global_norm(&mut grads, cfg.clip);
        adam.step(model, &grads, lr_at(step, cfg.lr, cfg.warmup, cfg.steps))?;
        if step % 50 == 0 {
            log::debug!(
                "heal step {step}: total {:.4} dpo {:.4} ul {:.4} ntul {:.4} kl {:.5} ewc {:.3e}",
                record.total,
                record.dpo,
                record.ul,
                record.ntul,
                record.kl,
                record.ewc
            );
        }
        trace.push(record);
    }
    Ok(trace)
}

fn finite(v: f64, term: &'static str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, AdapterState, ModelConfig};

    fn tiny() -> ToyModel {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_mlp: 16, vocab_size: 14, max_seq_len: 16, seed: 3 };
        ToyModel::new(cfg).unwrap()
    }

    fn tuple(x: Vec<u32>, yp: Vec<u32>, ym: Vec<u32>) -> PreferenceTuple {
        PreferenceTuple {
            prompt_id: "p".into(),
            x,
            y_plus: yp,
            y_minus: ym,
            trigger_z: 4.0,
            layer: 0,
            x_text: String::new(),
            y_plus_text: String::new(),
            y_minus_text: String::new(),
        }
    }

    #[test]
    fn dpo_at_zero_margin_is_log_two() {
        let m = tiny();
        let t = tuple(vec![1, 5, 6], vec![7, 8], vec![9, 2]);
        let l = dpo_loss(&m, &m, &t, 0.02, 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l2 = dpo_loss(&m, &m, &t, 0.02, 2.0).unwrap();
        assert_eq!(l2, 2.0 * l);
    }

    #[test]
    fn dpo_rejects_empty_continuation() {
        let m = tiny();
        let t = tuple(vec![1, 5], vec![], vec![9]);
        assert!(dpo_loss(&m, &m, &t, 0.02, 1.0).is_err());
    }

    #[test]
    fn kl_to_self_is_zero() {
        let m = tiny();
        let l = kl_anchor_loss(&m, &m, &[vec![1, 4, 5, 6], vec![1, 7]]).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn ewc_direct_formula() {
        let e = FisherEntry {
            layer: 0,
            projection: Projection::Q,
            weights: Tensor::vector(vec![2.0]),
            anchor: Tensor::vector(vec![1.0]),
        };
        let mut g = Graph::new();
        let theta = g.constant(Tensor::vector(vec![4.0]));
        let p = ewc_part(&mut g, theta, &e);
        let l = g.scale(p, 0.5);
        assert_eq!(g.value(l).item(), 9.0);
    }

    #[test]
    fn ewc_is_zero_without_drift() {
        let m = tiny();
        let f = FisherDiagonal::estimate(&m, &[vec![1, 4, 5, 6, 2]], &[Projection::Q, Projection::V]).unwrap();
        assert!(f.entries.iter().all(|e| e.weights.data().iter().all(|&x| x >= 0.0)));
        assert_eq!(ewc_loss(&m, &f).unwrap(), 0.0);
    }

    #[test]
    fn name_mass_saturates_at_clamp() {
        let m = tiny();
        let all: Vec<u32> = (0..12).collect();
        // Full-vocabulary name set on a four-token model.
        let cfg = ModelConfig { n_layers: 1, d_model: 4, n_heads: 1, d_mlp: 8, vocab_size: 4, max_seq_len: 8, seed: 0 };
        let small = ToyModel::new(cfg).unwrap();
        let l = name_token_unlikelihood(&small, &[1], &[0, 3], &[0, 1, 2, 3]).unwrap();
        assert!((l + (1e-6f64).ln()).abs() < 1e-6, "{l}");
        assert!(name_token_unlikelihood(&m, &[1, 4], &[5], &all).is_ok());
        let too_many: Vec<u32> = (0..13).collect();
        assert!(name_token_unlikelihood(&m, &[1, 4], &[5], &too_many).is_err());
        assert_eq!(name_token_unlikelihood(&m, &[1, 4], &[5], &[]).unwrap(), 0.0);
    }

    #[test]
    fn zero_steps_leave_the_adapter_unchanged() {
        let mut m = tiny();
        let ad = AdapterState::new(m.config(), AdapterConfig::default()).unwrap();
        m.attach_adapter(ad.clone()).unwrap();
        let t = tuple(vec![1, 5, 6], vec![7, 8], vec![9, 2]);
        let cfg = HealConfig { steps: 0, ..HealConfig::default() };
        let trace = heal(&mut m, &[t], &[vec![1, 4, 5]], &[9], None, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(m.adapter().unwrap(), &ad);
    }

    #[test]
    fn heal_freezes_base_and_is_deterministic() {
        let run = || {
            let mut m = tiny();
            let ad = AdapterState::new(m.config(), AdapterConfig::default()).unwrap();
            m.attach_adapter(ad).unwrap();
            let base = m.params().to_vec();
            let ts = vec![tuple(vec![1, 5, 6], vec![7, 8, 2], vec![9, 10, 2]), tuple(vec![1, 4], vec![7, 8, 2], vec![9, 11, 2])];
            let pool = vec![vec![1, 4, 5, 6, 2], vec![1, 12, 13, 2]];
            let f = FisherDiagonal::estimate(&m, &pool, &[Projection::Q, Projection::V, Projection::O]).unwrap();
            let cfg = HealConfig { steps: 15, batch_size: 2, anchor_batch: 2, ..HealConfig::default() };
            let trace = heal(&mut m, &ts, &pool, &[9], Some(&f), &cfg).unwrap();
            assert_eq!(m.params(), &base[..]);
            (trace, m.adapter().unwrap().clone())
        };
        let (ta, aa) = run();
        let (tb, ab) = run();
        assert_eq!(ta, tb);
        assert_eq!(aa, ab);
        assert!(ta.last().unwrap().dpo < ta[0].dpo);
        assert!(aa.pair(0, Projection::Q).b.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn degenerate_tuple_has_constant_loss() {
        let mut m = tiny();
        let ad = AdapterState::new(m.config(), AdapterConfig { dropout: 0.0, ..AdapterConfig::default() }).unwrap();
        m.attach_adapter(ad).unwrap();
        let t = tuple(vec![1, 5, 6], vec![7, 8], vec![7, 8]);
        let w = LossWeights { lambda_ul: 0.0, lambda_ntul: 0.0, lambda_kl: 0.0, lambda_ewc: 0.0, ..LossWeights::default() };
        let cfg = HealConfig { steps: 5, weights: w, ..HealConfig::default() };
        let trace = heal(&mut m, &[t], &[], &[], None, &cfg).unwrap();
        for r in trace {
            assert!((r.total - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn tiny() -> ToyModel {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_mlp: 16, vocab_size: 14, max_seq_len: 16, seed: 3 };
        ToyModel::new(cfg).unwrap()
    }

    fn dpo_at(m: &ToyModel, t: &PreferenceTuple, r: (f64, f64)) -> f64 {
        let mut g = Graph::new();
        let v = dpo_term(&mut g, m, &[t], &[r], &LossWeights::default(), &mut ForwardCtx::inference()).unwrap();
        g.value(v).item()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dpo_falls_as_the_margin_grows(rp in -5.0f64..5.0, rm in -5.0f64..5.0, extra in 0.1f64..50.0) {
            let m = tiny();
            let t = PreferenceTuple {
                prompt_id: "p".into(),
                x: vec![1, 5, 6],
                y_plus: vec![7, 8],
                y_minus: vec![9, 2],
                trigger_z: 4.0,
                layer: 0,
                x_text: String::new(),
                y_plus_text: String::new(),
                y_minus_text: String::new(),
            };
            // Lowering the reference preference raises the policy's margin.
            prop_assert!(dpo_at(&m, &t, (rp - extra, rm)) < dpo_at(&m, &t, (rp, rm)));
        }

        #[test]
        fn ewc_ignores_zero_fisher_coordinates(
            theta in prop::collection::vec(-3.0f64..3.0, 6),
            anchor in prop::collection::vec(-3.0f64..3.0, 6),
            mask in prop::collection::vec(any::<bool>(), 6),
            junk in prop::collection::vec(-100.0f64..100.0, 6),
        ) {
            let weights: Vec<f64> = mask.iter().map(|&on| if on { 0.7 } else { 0.0 }).collect();
            let e = FisherEntry { layer: 0, projection: Projection::Q, weights: Tensor::vector(weights), anchor: Tensor::vector(anchor) };
            let moved: Vec<f64> = theta.iter().zip(&mask).zip(&junk).map(|((&t, &on), &j)| if on { t } else { t + j }).collect();
            let mut g = Graph::new();
            let a = g.constant(Tensor::vector(theta));
            let b = g.constant(Tensor::vector(moved));
            let (pa, pb) = (ewc_part(&mut g, a, &e), ewc_part(&mut g, b, &e));
            prop_assert_eq!(g.value(pa).item(), g.value(pb).item());
        }
    }
}
