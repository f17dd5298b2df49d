//! The shared embedding, the prediction / matching / correlation subnets
//! and the LR and FM baselines.

mod baselines;
mod deepmcp;
mod embedding;
mod tower;

pub use baselines::{FmModel, LrModel};
pub use deepmcp::{
    AuxTowers, BatchLosses, BatchPass, CorrelationExample, DeepMcp, LossConfig, Objective,
    SubnetCounts,
};
pub use embedding::{embed_group, SharedEmbedding, SparseTable};
pub use tower::{Tower, TowerCache};

use thiserror::Error;

use crate::features::Instance;
use crate::tensor::TensorError;

/// Uniform init half-width for weights and embeddings.
pub const INIT_SCALE: f64 = 0.05;

/// How FC weights are drawn. Embeddings are always uniform on
/// `±init_scale` and biases start at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on `±init_scale`.
    #[default]
    Uniform,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))` per layer.
    Glorot,
}

impl InitScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::Uniform => "uniform",
            InitScheme::Glorot => "glorot",
        }
    }
}

impl std::str::FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "uniform" => Ok(InitScheme::Uniform),
            "glorot" => Ok(InitScheme::Glorot),
            other => Err(format!("expected uniform or glorot, got {other:?}")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("instance has {got} {group} fields, schema declares {expected}")]
    InstanceShape {
        group: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("feature index {index} outside hash space {hash_space}")]
    IndexOutOfRange { index: usize, hash_space: usize },
    #[error("matching and correlation towers are not loaded")]
    Stripped,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch pass was computed without caching; cannot backpropagate")]
    MissingCache,
    #[error("correlation example has {got} negatives, expected {expected}")]
    NegativeCount { expected: usize, got: usize },
}

/// Network shape. The feature layout comes from the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub hash_space: usize,
    pub embedding_dim: usize,
    pub layer_dims: Vec<usize>,
    pub repr_dim: usize,
    /// Dropout ratio after each prediction-tower layer in train mode.
    pub dropout: f64,
}

/// Anything that turns an impression into a click probability.
pub trait Scorer {
    fn score(&self, instance: &Instance) -> Result<f64, ModelError>;
}
