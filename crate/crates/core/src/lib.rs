//! Federated LoRA simulator with Rest-of-World aggregation and a per-input
//! adaptive mixer, baseline aggregation strategies, synthetic heterogeneous
//! tasks and convergence diagnostics.

pub mod codec;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod lora;
pub mod matrix;
pub mod nn;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use federation::Strategy;
pub use matrix::Matrix;
