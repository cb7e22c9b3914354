//! Mixtures of accent-specific low-rank adapters on a small encoder-decoder
//! transformer, with a synthetic multi-accent corpus, WER scoring and an
//! experiment harness.

pub mod accent;
pub mod adapters;
pub mod blob;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numcore;

pub use accent::AccentId;
pub use adapters::{mixture_weights, param_count, AdaptedLinear, ExpertBank, FtMethod, LoraFactors, MixSpec};
pub use error::{Error, Result};
pub use model::{FtConfig, ModelConfig, Route, Transformer};
pub use numcore::{Mat, Rng};
