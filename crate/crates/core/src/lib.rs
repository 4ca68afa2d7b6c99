//! Post-training structured pruning for grouped-query-attention transformers.
//!
//! The pipeline prunes FFN intermediate nodes layer by layer, reconstructing
//! each layer's down projection by least squares on calibration activations,
//! then removes whole grouped KV heads (one KV head plus its query group) by
//! iteratively picking the heads whose removal hurts perplexity least.
//!
//! Everything runs on a small self-contained transformer ([`model`]) so the
//! whole pipeline is reproducible on a laptop.

pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod pruning;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{FfnKind, HeadMask, LayerWeights, ModelConfig, ParamCounts, ToyTransformer};
pub use data::CalibrationSet;
pub use eval::{Perplexity, PerplexityResult};
pub use pruning::{PruneConfig, PruneReport, SparsityAllocation};
