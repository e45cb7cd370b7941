//! Dual co-attention visual question answering with multiplicative
//! feature embedding.
//!
//! A question is encoded by a GRU. Two attention branches each fuse the
//! question with the whole-image feature grid and the detection-box features
//! by element-wise multiplication in a common space: the region branch attends
//! over grid cells, the detection branch over boxes. The question-gated
//! attended features are merged and classified over a fixed answer set.
//!
//! Everything is differentiated by a small eager tape ([`graph`]) in double
//! precision, and trained with RMSProp ([`trainer`]). Synthetic planted data
//! ([`data`]) makes the model checkable end to end on a laptop.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dump;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod model;
mod params;
pub mod question;
pub mod tensor;
pub mod trainer;

pub use config::{
    Branches, CombineOp, FusionOp, ModelConfig, Normalization, RunConfig, TrainConfig,
};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::DualMfaParameters;
pub use params::uniform_init;
pub use tensor::Tensor;
