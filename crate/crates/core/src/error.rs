// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the unlearning stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("zero pooled standard deviation")]
    ZeroVariance,

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no signal: mean difference norm {0:e} below 1e-10")]
    NoSignal(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("capsule already installed on layer {layer} for subject {subject}")]
    DoubleInstall { subject: String, layer: usize },

    #[error("no capsule trigger fired over {prompts} prompts (tau too high or wrong subject)")]
    NoTriggers { prompts: usize },

    #[error("loss term {term} is non-finite at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("missing artifact {path} (run stage `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
