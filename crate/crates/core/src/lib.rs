//! Multilinear mixture-of-experts layers.
//!
//! The expert weight tensor of a layer is stored either densely or in CP /
//! tensor-ring factorized form; the factorized forward and backward passes
//! never materialize it. Around the layers the crate provides gating with
//! entmax/softmax and normalization, cost models, expert-intervention analysis,
//! a small training harness and a binary checkpoint format.

pub mod activation;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod model;
pub mod norm;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::Model;
pub use scalar::{Dtype, Scalar};
pub use tensor::{FactorMatrix, Tensor, TrCore};
