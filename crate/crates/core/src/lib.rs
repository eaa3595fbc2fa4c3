//! Retrieval-augmented autoregressive language modelling at desk scale.
//!
//! The crate bundles a chunked retrieval datastore, a compressed IVF/OPQ/PQ index
//! with HNSW coarse assignment, a decoder-only transformer with chunked
//! cross-attention over encoded neighbors, retrieval-aware generation and the
//! usual automatic text-quality and QA metrics.
//!
//! Model and layer code is generic over [`Scalar`]; the aliases below pin the two
//! concrete precisions used in practice.

pub mod error;
pub mod eval;
pub mod numerics;
pub mod scalar;
pub mod ann;
pub mod data;
pub mod datastore;
pub mod generation;
pub mod model;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type RetroParams32 = model::RetroParams<f32>;
pub type RetroParams64 = model::RetroParams<f64>;
