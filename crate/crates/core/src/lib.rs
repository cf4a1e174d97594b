//! Critical-layer identification and depth pruning for patch-based
//! time-series forecasting transformers.
//!
//! The crate covers the whole loop: a small decoder-only forecaster with
//! per-layer instrumentation, representation diagnostics (inter-layer
//! distance and cosine similarity, attention-head similarity, decayed
//! redundancy, attention entropy), importance scoring with layer selection,
//! structural pruning, fine-tuning, and evaluation of accuracy against
//! inference speed.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
mod codec;
pub mod config;
pub mod data;
pub mod dump;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
