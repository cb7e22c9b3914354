//! Encoder-decoder transformer with adapter attach points on every attention projection.

mod checkpoint;
mod config;
mod transformer;

pub use checkpoint::{load_model, save_model};
pub use config::{FtConfig, GridEntry, ModelConfig};
pub use transformer::{Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Route, Transformer};
