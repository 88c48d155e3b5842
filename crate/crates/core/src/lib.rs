//! Joint one-stage structured pruning of a small Vision Transformer.
//!
//! A supernet is searched with differentiable bi-masks (importance blended
//! with step-wise sparsity), an adaptive one-hot regularizer drives each
//! submodule's width distribution to a single choice, a triggered pruner
//! shrinks the search space as it goes, and progressive masked image
//! modeling regularizes the shrinking features. See the README for the CLI.

pub mod bimask;
pub mod commands;
pub mod config;
pub mod cost;
pub mod data;
pub mod optim;
pub mod pmim;
pub mod pruner;
pub mod regularizers;
pub mod space;
pub mod tensor;
pub mod trainer;
pub mod vit;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("prune: {0}")]
    Prune(String),
    #[error("cost model: {0}")]
    Cost(String),
    #[error("materialize: {0}")]
    Materialize(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
