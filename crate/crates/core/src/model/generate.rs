// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy decoding with a per-step probability-mass trace.

use super::tokenizer::EOS;
use super::ToyModel;
use crate::error::{Error, Result};
use crate::tensor::softmax;

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// New tokens only; ends with `<eos>` when the model stopped on its own.
    pub tokens: Vec<u32>,
    /// Probability mass on the name-token set at each step.
    pub mass: Vec<f64>,
}

impl ToyModel {
    /// Greedy continuation of `prompt` for up to `max_new` steps, stopping at
    /// `<eos>` or the context limit. Ties go to the lowest token id.
    pub fn generate(&self, prompt: &[u32], max_new: usize, name_set: &[u32]) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("generate needs a non-empty prompt".into()));
        }
        let mut names: Vec<usize> = name_set.iter().map(|&t| t as usize).collect();
        names.sort_unstable();
        names.dedup();
        let mut seq = prompt.to_vec();
        let mut out = Generation { tokens: Vec::new(), mass: Vec::new() };
        while out.tokens.len() < max_new && seq.len() < self.config().max_seq_len {
            let logits = self.logits(&seq)?;
            let last = logits.row(logits.rows() - 1);
            let probs = softmax(last);
            out.mass.push(names.iter().filter_map(|&i| probs.get(i)).sum());
            let next = argmax(last) as u32;
            out.tokens.push(next);
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
