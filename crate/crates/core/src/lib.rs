//! Domain-specific adaptive normalization for unsupervised domain
//! generalization of re-identification embeddings.
//!
//! The crate bundles everything needed to reproduce the approach at desk
//! scale: a small reverse-mode autodiff ([`tensor`]), the normalization
//! layers ([`norm`]), a configurable CNN backbone ([`model`]), the training
//! losses ([`loss`]), DBSCAN pseudo-labelling and clustering metrics
//! ([`cluster`]), a synthetic multi-domain dataset ([`data`]), the
//! alternating cluster/train loop ([`pipeline`]) and retrieval evaluation
//! ([`eval`]).

pub mod cluster;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod norm;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Graph, Scalar, Shape, Tensor, Var};

/// Train or eval behaviour of normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
