// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-rank adapter on attention projections.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ADAPTER_PARAM_BASE};
use crate::autodiff::ParamId;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    V,
    O,
}

impl Projection {
    fn slot(self) -> usize {
        match self {
            Projection::Q => 0,
            Projection::V => 1,
            Projection::O => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Projection>,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
            targets: vec![Projection::Q, Projection::V, Projection::O],
            seed: 0,
        }
    }
}

impl AdapterConfig {
    /// `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `A` is `rank × d_in`, `B` is `d_out × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub config: AdapterConfig,
    pub enabled: bool,
    d_model: usize,
    /// `[layer][q, v, o]`; untargeted projections hold zero-rank-free
    /// placeholders that are never read.
    pairs: Vec<[LoraPair; 3]>,
}

impl AdapterState {
    /// Fresh adapter: `A` Gaussian with std `1/√d_in`, `B` zero.
    pub fn new(model: &ModelConfig, config: AdapterConfig) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidArgument(format!("adapter dropout {} not in [0,1)", config.dropout)));
        }
        let d = model.d_model;
        let r = config.rank;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let mut pairs = Vec::with_capacity(model.n_layers);
        for _ in 0..model.n_layers {
            let mk = |rng: &mut ChaCha8Rng| LoraPair {
                a: Tensor::new(vec![r, d], (0..r * d).map(|_| dist.sample(rng)).collect()).unwrap(),
                b: Tensor::zeros(&[d, r]),
            };
            pairs.push([mk(&mut rng), mk(&mut rng), mk(&mut rng)]);
        }
        Ok(Self { config, enabled: true, d_model: d, pairs })
    }

    pub fn n_layers(&self) -> usize {
        self.pairs.len()
    }

    pub fn targets(&self, proj: Projection) -> bool {
        self.config.targets.contains(&proj)
    }

    pub fn pair(&self, layer: usize, proj: Projection) -> &LoraPair {
        &self.pairs[layer][proj.slot()]
    }

    pub fn pair_mut(&mut self, layer: usize, proj: Projection) -> &mut LoraPair {
        &mut self.pairs[layer][proj.slot()]
    }

    pub fn param_ids(&self, layer: usize, proj: Projection) -> (ParamId, ParamId) {
        let base = ADAPTER_PARAM_BASE + (layer * 3 + proj.slot()) * 2;
        (ParamId(base), ParamId(base + 1))
    }

    /// Trainable tensors with their ids, in a fixed order.
    pub fn trainable(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out = Vec::new();
        for l in 0..self.pairs.len() {
            for &p in &self.config.targets {
                let (ia, ib) = self.param_ids(l, p);
                let pair = self.pair(l, p);
                out.push((ia, &pair.a));
                out.push((ib, &pair.b));
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let off = id.0.checked_sub(ADAPTER_PARAM_BASE)?;
        let (slot, is_b) = (off / 2, off % 2 == 1);
        let (l, p) = (slot / 3, slot % 3);
        let pair = self.pairs.get_mut(l)?.get_mut(p)?;
        Some(if is_b { &mut pair.b } else { &mut pair.a })
    }

    pub(crate) fn check_dims(&self, model: &ModelConfig) -> Result<()> {
        if self.pairs.len() != model.n_layers || self.d_model != model.d_model {
            return Err(Error::Shape(format!(
                "adapter for {} layers × width {} does not fit model with {} layers × width {}",
                self.pairs.len(),
                self.d_model,
                model.n_layers,
                model.d_model
            )));
        }
        for layer in &self.pairs {
            for pair in layer {
                if pair.a.shape() != [self.config.rank, self.d_model]
                    || pair.b.shape() != [self.d_model, self.config.rank]
                {
                    return Err(Error::Shape("adapter factor has the wrong shape".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut blobs = Vec::new();
        for (l, layer) in self.pairs.iter().enumerate() {
            for p in [Projection::Q, Projection::V, Projection::O] {
                let pair = &layer[p.slot()];
                blobs.push((format!("layers.{l}.{}.a", p.name()), pair.a.clone()));
                blobs.push((format!("layers.{l}.{}.b", p.name()), pair.b.clone()));
            }
        }
        let header = serde_json::json!({
            "adapter": self.config,
            "enabled": self.enabled,
            "d_model": self.d_model,
            "n_layers": self.pairs.len(),
        });
        Ok(Container { kind: "adapter".into(), config: header.to_string(), blobs })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "adapter" {
            return Err(Error::Format(format!("expected an adapter file, found {:?}", c.kind)));
        }
        #[derive(Deserialize)]
        struct Header {
            adapter: AdapterConfig,
            enabled: bool,
            d_model: usize,
            n_layers: usize,
        }
        let h: Header = serde_json::from_str(&c.config)?;
        let mut pairs = Vec::with_capacity(h.n_layers);
        for l in 0..h.n_layers {
            let get = |p: Projection| -> Result<LoraPair> {
                Ok(LoraPair {
                    a: c.blob(&format!("layers.{l}.{}.a", p.name()))?.clone(),
                    b: c.blob(&format!("layers.{l}.{}.b", p.name()))?.clone(),
                })
            };
            pairs.push([get(Projection::Q)?, get(Projection::V)?, get(Projection::O)?]);
        }
        let state = Self { config: h.adapter, enabled: h.enabled, d_model: h.d_model, pairs };
        state.check_dims(&ModelConfig {
            n_layers: h.n_layers,
            d_model: h.d_model,
            ..ModelConfig::default()
        })?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyModel;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_mlp: 16, vocab_size: 12, max_seq_len: 10, seed: 3 }
    }

    fn randomize_b(state: &mut AdapterState, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..state.n_layers() {
            for p in [Projection::Q, Projection::V, Projection::O] {
                for x in state.pair_mut(l, p).b.data_mut() {
                    *x = rng.random_range(-0.3..0.3);
                }
            }
        }
    }

    #[test]
    fn fresh_adapter_is_identity_and_detach_restores() {
        let mut m = ToyModel::new(cfg()).unwrap();
        let toks = [1u32, 5, 6, 7];
        let base = m.logits(&toks).unwrap();
        m.attach_adapter(AdapterState::new(&cfg(), AdapterConfig::default()).unwrap()).unwrap();
        assert_eq!(m.logits(&toks).unwrap(), base);
        let mut st = m.detach_adapter().unwrap();
        randomize_b(&mut st, 1);
        m.attach_adapter(st).unwrap();
        assert_ne!(m.logits(&toks).unwrap(), base);
        m.detach_adapter();
        assert_eq!(m.logits(&toks).unwrap(), base);
    }

    #[test]
    fn merge_matches_attach_on_random_prompts() {
        let mut st = AdapterState::new(&cfg(), AdapterConfig::default()).unwrap();
        randomize_b(&mut st, 2);
        let mut attached = ToyModel::new(cfg()).unwrap();
        let mut merged = attached.clone();
        attached.attach_adapter(st.clone()).unwrap();
        merged.merge_adapter(&st).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let len = rng.random_range(1..=10);
            let toks: Vec<u32> = (0..len).map(|_| rng.random_range(0..12)).collect();
            let a = attached.logits(&toks).unwrap();
            let b = merged.logits(&toks).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let st = AdapterState::new(&ModelConfig { d_model: 4, ..cfg() }, AdapterConfig::default()).unwrap();
        let mut m = ToyModel::new(cfg()).unwrap();
        assert!(matches!(m.attach_adapter(st), Err(Error::Shape(_))));
    }

    #[test]
    fn file_round_trip() {
        let mut st = AdapterState::new(&cfg(), AdapterConfig::default()).unwrap();
        randomize_b(&mut st, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        st.save(&p).unwrap();
        assert_eq!(AdapterState::load(&p).unwrap(), st);
    }
}
