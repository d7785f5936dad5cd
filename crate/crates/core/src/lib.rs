// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod autodiff;
pub mod capsule;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod healing;
pub mod io;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod probe;
pub mod signature;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelConfig, ToyModel};
pub use tensor::Tensor;
