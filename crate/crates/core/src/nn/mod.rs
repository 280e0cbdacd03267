//! Minimal reverse-mode differentiation and optimization substrate shared by
//! every trainable model: tensors, a recording graph, layers, Adam and the
//! checkpoint container.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod tensor;

pub use adam::{Adam, DEFAULT_LR};
pub use checkpoint::Checkpoint;
pub use graph::{BatchStats, Gradients, Graph, ParamId, ParamStore, Parameter, Var};
pub use layers::{
    embedding_lookup, mean_pool, weighted_mean_pool, BatchNorm, GruCell, GruStack, Linear,
};
pub use tensor::{log_softmax_into, sigmoid, softmax_in_place, Real, Tensor, PRECISION};

/// Default global-norm gradient clipping threshold.
pub const DEFAULT_CLIP_NORM: Real = 5.0;

#[cfg(all(test, not(feature = "f32")))]
mod tests;
