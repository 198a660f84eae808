//! Desk-scale federated domain adaptation simulator.
//!
//! K labeled source clients and one unlabeled target client collaborate
//! through a central aggregator without any raw data crossing client
//! boundaries. Each client owns a compact transformer encoder with a
//! prototype classifier head and a projection head. Source clients train
//! on their local labels; the target client adapts via a domain-level
//! contrastive loss on intermediate block activations, a category-level
//! semantic-matching loss against source prototypes, and pseudo-label
//! self-training. Models are merged with weighted parameter averaging at
//! every communication round.
//!
//! All numerical code is generic over the scalar type (`f32` or `f64`)
//! through the [`Scalar`] trait; concrete aliases live at the crate root.

pub mod autodiff;
pub mod backbone;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod losses;
pub mod pseudo;
pub mod scalar;

pub use error::{CoreError, Result};
pub use scalar::Scalar;

/// Autodiff graph over single-precision values.
pub type Graph32 = autodiff::Graph<f32>;
/// Autodiff graph over double-precision values.
pub type Graph64 = autodiff::Graph<f64>;
/// Client model in single precision (the default for experiment runs).
pub type Model32 = backbone::ModelParams<f32>;
/// Client model in double precision (used by gradient checks).
pub type Model64 = backbone::ModelParams<f64>;
