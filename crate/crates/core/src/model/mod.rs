//! Deterministic `f64` decoder with position supervision.

pub mod decoder;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use decoder::{
    accumulate_refinement, decoder_forward, embed_identifiers, greedy_decode, iac_correct,
    loss_all, predict_heads, softmax_spatial, AttentionState, FeatureGrid,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{CheckpointMeta, Hyper, ModelParams};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("index {index} out of range for {context} of size {size}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        size: usize,
    },
    #[error("model has no position branch but the operation requires one")]
    MissingPositionBranch,
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error("sample {index} cannot be used for training: {reason}")]
    BadSample { index: usize, reason: String },
    #[error("checkpoint problem: {0}")]
    Checkpoint(String),
}
