// SPDX-License-Identifier: MIT OR Apache-2.0

//! Leakage, latent-mass and utility diagnostics, and the mechanism-state rule.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::train::batch_nll;
use crate::model::{ForwardCtx, ToyModel, Vocab};
use crate::parallel::par_map;

pub const EL10_STEPS: usize = 10;
pub const EL10_FLOOR: f64 = 1e-9;
pub const DEFAULT_EPSILON: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MechanismState {
    TypeI,
    TypeII,
    TypeIII,
}

impl MechanismState {
    pub fn label(self) -> &'static str {
        match self {
            MechanismState::TypeI => "Type I",
            MechanismState::TypeII => "Type II",
            MechanismState::TypeIII => "Type III",
        }
    }

    pub fn meaning(self) -> &'static str {
        match self {
            MechanismState::TypeI => "erasure",
            MechanismState::TypeII => "obfuscation",
            MechanismState::TypeIII => "instability",
        }
    }
}

impl fmt::Display for MechanismState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// `smr > ε` is instability; otherwise `el10 < 1` is erasure and anything
/// else (including exactly 1) is obfuscation.
pub fn classify_mechanism(smr: f64, el10: f64, epsilon: f64) -> MechanismState {
    if smr > epsilon {
        MechanismState::TypeIII
    } else if el10 < 1.0 {
        MechanismState::TypeI
    } else {
        MechanismState::TypeII
    }
}

/// Case-insensitive substring test over a decoded continuation.
pub fn mentions(text: &str, surface_forms: &[String]) -> bool {
    let t = text.to_lowercase();
    surface_forms.iter().any(|s| !s.is_empty() && t.contains(&s.to_lowercase()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDetail {
    pub prompt_id: String,
    pub prompt: String,
    pub continuation: String,
    pub mentions: bool,
    pub name_mass: f64,
}

/// Greedy continuations and name-token mass over the first ten steps for
/// every prompt.
pub fn probe_outputs(
    model: &ToyModel,
    vocab: &Vocab,
    prompts: &[(String, Vec<u32>)],
    surface_forms: &[String],
    names: &[u32],
    max_new: usize,
    workers: usize,
) -> Result<Vec<PromptDetail>> {
    if surface_forms.iter().all(String::is_empty) {
        return Err(Error::InvalidArgument("no subject surface forms given".into()));
    }
    par_map(prompts, workers, |(id, x)| {
        let g = model.generate(x, max_new.max(EL10_STEPS), names)?;
        let shown = &g.tokens[..g.tokens.len().min(max_new)];
        let continuation = vocab.decode(shown);
        Ok(PromptDetail {
            prompt_id: id.clone(),
            prompt: vocab.decode(x),
            mentions: mentions(&continuation, surface_forms),
            continuation,
            name_mass: g.mass.iter().take(EL10_STEPS).sum(),
        })
    })
    .into_iter()
    .collect()
}

/// Percentage of prompts whose continuation names the subject.
pub fn smr_of(details: &[PromptDetail]) -> Result<f64> {
    if details.is_empty() {
        return Err(Error::InvalidArgument("subject mention rate needs at least one prompt".into()));
    }
    Ok(100.0 * details.iter().filter(|d| d.mentions).count() as f64 / details.len() as f64)
}

pub fn smr(
    model: &ToyModel,
    vocab: &Vocab,
    prompts: &[(String, Vec<u32>)],
    surface_forms: &[String],
    max_new: usize,
    workers: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("subject mention rate needs at least one prompt".into()));
    }
    smr_of(&probe_outputs(model, vocab, prompts, surface_forms, &[], max_new, workers)?)
}

/// Mean over prompts of the summed name-token mass along the model's own
/// greedy path for the first ten steps.
pub fn early_mass(model: &ToyModel, prompts: &[Vec<u32>], names: &[u32], workers: usize) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("early-step mass needs at least one prompt".into()));
    }
    if names.is_empty() {
        return Err(Error::InvalidArgument("early-step mass needs a non-empty name-token set".into()));
    }
    let per: Vec<f64> = par_map(prompts, workers, |x| {
        model.generate(x, EL10_STEPS, names).map(|g| g.mass.iter().sum::<f64>())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `raw(post) / max(raw(base), 1e-9)`.
pub fn el10_ratio(post_raw: f64, base_raw: f64) -> f64 {
    post_raw / base_raw.max(EL10_FLOOR)
}

pub fn el10(post: &ToyModel, base: &ToyModel, prompts: &[Vec<u32>], names: &[u32], workers: usize) -> Result<f64> {
    Ok(el10_ratio(early_mass(post, prompts, names, workers)?, early_mass(base, prompts, names, workers)?))
}

/// `exp` of the mean next-token negative log-likelihood per predicted token.
pub fn perplexity(model: &ToyModel, corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("perplexity needs a non-empty corpus".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut g = Graph::new();
    for chunk in corpus.chunks(32) {
        g.reset();
        let n: usize = chunk.iter().map(|s| s.len().saturating_sub(1)).sum();
        if n == 0 {
            continue;
        }
        let nll = batch_nll(&mut g, model, chunk, &mut ForwardCtx::inference())?;
        total += g.value(nll).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("perplexity corpus has no predicted tokens".into()));
    }
    Ok((total / count as f64).exp())
}

pub fn drift_percent(ppl_post: f64, ppl_pre: f64) -> f64 {
    100.0 * (ppl_post - ppl_pre) / ppl_pre
}

pub fn utility_drift(post: &ToyModel, pre: &ToyModel, corpus: &[Vec<u32>]) -> Result<f64> {
    Ok(drift_percent(perplexity(post, corpus)?, perplexity(pre, corpus)?))
}

/// A completion prompt and the object it should produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactProbe {
    pub subject: String,
    pub prompt: Vec<u32>,
    pub object: String,
}

/// Percentage of probes whose greedy continuation contains the object.
pub fn fact_accuracy(model: &ToyModel, vocab: &Vocab, probes: &[FactProbe], max_new: usize, workers: usize) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("fact accuracy needs at least one probe".into()));
    }
    let hits: Vec<bool> = par_map(probes, workers, |p| {
        model.generate(&p.prompt, max_new, &[]).map(|g| {
            let words = vocab.decode(&g.tokens);
            words.split(' ').any(|w| w == p.object.to_lowercase())
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub subject: String,
    pub smr: f64,
    pub el10: f64,
    pub utility_drift: f64,
    pub retained_fact_accuracy: f64,
    pub retained_fact_accuracy_base: f64,
    /// Fact accuracy of the unmodified model over every subject.
    pub base_fact_accuracy: f64,
    pub target_smr_base: f64,
    pub epsilon: f64,
    pub mechanism_state: MechanismState,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<PromptDetail>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn classifier_regions() {
        assert_eq!(classify_mechanism(0.0, 0.020, 5.0), MechanismState::TypeI);
        assert_eq!(classify_mechanism(0.0, 6.19, 5.0), MechanismState::TypeII);
        assert_eq!(classify_mechanism(45.6, 15.39, 5.0), MechanismState::TypeIII);
        assert_eq!(classify_mechanism(5.0, 1.0, 5.0), MechanismState::TypeII);
        assert_eq!(classify_mechanism(5.0001, 0.0, 5.0), MechanismState::TypeIII);
    }

    #[test]
    fn uniform_model_has_vocabulary_perplexity() {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_mlp: 8, vocab_size: 256, max_seq_len: 16, seed: 0 };
        let mut m = ToyModel::new(cfg).unwrap();
        let last = m.params().len() - 1;
        m.params_mut()[last].data_mut().iter_mut().for_each(|x| *x = 0.0);
        let ppl = perplexity(&m, &[vec![1, 40, 200, 7, 2], vec![1, 9, 2]]).unwrap();
        assert!((ppl - 256.0).abs() < 1e-9, "{ppl}");
        assert_eq!(utility_drift(&m, &m, &[vec![1, 5, 2]]).unwrap(), 0.0);
        assert!(perplexity(&m, &[]).is_err());
    }

    #[test]
    fn drift_arithmetic() {
        assert!((drift_percent(21.0, 20.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn el10_self_ratio_and_zero_mass() {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_mlp: 8, vocab_size: 20, max_seq_len: 16, seed: 4 };
        let m = ToyModel::new(cfg).unwrap();
        let prompts = vec![vec![1, 5, 6], vec![1, 9]];
        assert_eq!(el10(&m, &m, &prompts, &[7, 8], 1).unwrap(), 1.0);
        assert_eq!(el10_ratio(0.0, 0.3), 0.0);
        assert_eq!(el10_ratio(0.5, 0.0), 0.5 / EL10_FLOOR);
    }

    #[test]
    fn mention_matching() {
        let names = vec!["Zorvak".to_string()];
        assert!(mentions("zorvak 's label is redcap .", &names));
        assert!(!mentions("i cannot provide information", &names));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn classifier_partitions_the_plane(smr in 0.0f64..100.0, el10 in 0.0f64..20.0, eps in 0.0f64..20.0) {
            let s = classify_mechanism(smr, el10, eps);
            let expected = if smr > eps {
                MechanismState::TypeIII
            } else if el10 < 1.0 {
                MechanismState::TypeI
            } else {
                MechanismState::TypeII
            };
            prop_assert_eq!(s, expected);
        }

        #[test]
        fn leakage_ignores_prompt_order(order in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(), seed in 0u64..4) {
            let text: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
            let vocab = Vocab::build([text.join(" ").as_str()]);
            let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_mlp: 8, vocab_size: vocab.len(), max_seq_len: 16, seed };
            let m = ToyModel::new(cfg).unwrap();
            let prompts: Vec<(String, Vec<u32>)> = (0..6u32).map(|i| (format!("p{i}"), vec![1, 4 + i, 5 + i])).collect();
            let shuffled: Vec<(String, Vec<u32>)> = order.iter().map(|&i| prompts[i].clone()).collect();
            let forms = vec!["w7".to_string(), "w9".to_string()];
            let a = smr(&m, &vocab, &prompts, &forms, 6, 1).unwrap();
            let b = smr(&m, &vocab, &shuffled, &forms, 6, 1).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
