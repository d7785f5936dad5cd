// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam with global-norm clipping, and next-token training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BaseMode, Forward, ForwardCtx, ToyModel, ADAPTER_PARAM_BASE};
use crate::autodiff::{Gradients, Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1500, lr: 3e-3, batch_size: 16, warmup: 50, clip: 1.0, seed: 0 }
    }
}

/// Linear warmup then cosine decay to 10% of the peak.
pub fn lr_at(step: usize, cfg_lr: f64, warmup: usize, steps: usize) -> f64 {
    if step < warmup {
        return cfg_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = steps.saturating_sub(warmup).max(1) as f64;
    let p = ((step - warmup) as f64 / span).min(1.0);
    cfg_lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter in `grads`. A zero learning
    /// rate leaves the model untouched.
    pub fn step(&mut self, model: &mut ToyModel, grads: &Gradients, lr: f64) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, g) in grads {
            let p = param_mut(model, id)?;
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn param_mut(model: &mut ToyModel, id: ParamId) -> Result<&mut Tensor> {
    if id.0 >= ADAPTER_PARAM_BASE {
        model
            .adapter_mut()
            .and_then(|a| a.tensor_mut(id))
            .ok_or_else(|| Error::Autodiff(format!("gradient for unknown adapter parameter {}", id.0)))
    } else {
        let n = model.params().len();
        model
            .params_mut()
            .get_mut(id.0)
            .ok_or_else(|| Error::Autodiff(format!("gradient for unknown parameter {} of {n}", id.0)))
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let total: f64 = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if total > max_norm && max_norm > 0.0 {
        let s = max_norm / total;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    total
}

/// Flat indices into stacked logits for next-token targets: position `t`
/// predicts token `t + 1`, for positions `from..len-1` of each sequence.
pub fn next_token_targets(f: &Forward, batch: &[Vec<u32>], vocab: usize, from: &[usize]) -> Vec<usize> {
    let mut idx = Vec::new();
    for ((seq, &off), &start) in batch.iter().zip(&f.offsets).zip(from) {
        for t in start..seq.len().saturating_sub(1) {
            idx.push((off + t) * vocab + seq[t + 1] as usize);
        }
    }
    idx
}

/// Mean next-token negative log-likelihood over a batch.
pub fn batch_nll(g: &mut Graph, model: &ToyModel, batch: &[Vec<u32>], ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    let f = model.forward_graph(g, batch, ctx)?;
    let idx = next_token_targets(&f, batch, model.config().vocab_size, &vec![0; batch.len()]);
    if idx.is_empty() {
        return Err(Error::InvalidArgument("batch has no next-token targets".into()));
    }
    let lp = g.log_softmax(f.logits);
    let flat_len = g.value(lp).len();
    let flat = g.reshape(lp, vec![flat_len]);
    let picked = g.select(flat, &idx);
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Trains every base parameter on next-token prediction over `corpus`.
pub fn train_to_memorize(model: &mut ToyModel, corpus: &[Vec<u32>], cfg: &TrainConfig) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut g = Graph::new();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        g.reset();
        let mut ctx = ForwardCtx { base: BaseMode::All, ..ForwardCtx::inference() };
        let loss = batch_nll(&mut g, model, &batch, &mut ctx)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss = {value}") });
        }
        let mut grads = g.backward(loss).map_err(|e| Error::Diverged { step, detail: e.to_string() })?;
        clip_global_norm(&mut grads, cfg.clip);
        adam.step(model, &grads, lr_at(step, cfg.lr, cfg.warmup, cfg.steps))?;
        losses.push(value);
        if step % 100 == 0 {
            log::debug!("train step {step}: loss {value:.4}");
        }
    }
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok(TrainReport { losses, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokenizer::{BOS, EOS};
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 1, d_model: 16, n_heads: 2, d_mlp: 32, vocab_size: 12, max_seq_len: 12, seed: 5 }
    }

    #[test]
    fn memorizes_a_single_sequence() {
        let mut m = ToyModel::new(cfg()).unwrap();
        let seq = vec![BOS, 4, 7, 5, 9, 11, 6, EOS];
        let tc = TrainConfig { steps: 200, lr: 1e-2, batch_size: 1, warmup: 10, ..TrainConfig::default() };
        let r = train_to_memorize(&mut m, &[seq.clone()], &tc).unwrap();
        assert!(r.final_loss < r.losses[0]);
        let g = m.generate(&seq[..1], 10, &[]).unwrap();
        assert_eq!(g.tokens, seq[1..].to_vec());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = ToyModel::new(cfg()).unwrap();
        let before = m.params().to_vec();
        let tc = TrainConfig { steps: 5, lr: 0.0, batch_size: 2, warmup: 0, ..TrainConfig::default() };
        train_to_memorize(&mut m, &[vec![BOS, 4, 5, EOS]], &tc).unwrap();
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = vec![vec![BOS, 4, 5, 6, EOS], vec![BOS, 7, 8, EOS], vec![BOS, 9, 4, 10, EOS]];
        let tc = TrainConfig { steps: 20, batch_size: 2, ..TrainConfig::default() };
        let mut a = ToyModel::new(cfg()).unwrap();
        let mut b = ToyModel::new(cfg()).unwrap();
        let ra = train_to_memorize(&mut a, &corpus, &tc).unwrap();
        let rb = train_to_memorize(&mut b, &corpus, &tc).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = Gradients::new();
        g.insert(ParamId(0), Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[&ParamId(0)].data()[0] - 0.6).abs() < 1e-15);
    }
}
