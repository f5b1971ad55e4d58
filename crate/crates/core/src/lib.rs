//! Prompt initialization and prompt tuning for a small Vision Transformer.

pub mod archive;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod prompt_init;
pub mod rng;
pub mod task_synth;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
