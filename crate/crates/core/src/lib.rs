//! Distantly supervised named entity recognition with a mixture of
//! document-level taggers, fair (Sinkhorn-balanced) expert assignment and
//! teacher-student self-training.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod checkpoint;
pub mod corpus;
pub mod distant;
pub mod error;
pub mod eval;
pub mod fairness;
pub mod moe;
pub mod scalar;
pub mod selftrain;
pub mod synth;
pub mod tagger;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Expert = tagger::ExpertParams<f64>;
pub type Expert32 = tagger::ExpertParams<f32>;
pub type Pool = moe::ExpertPool<f64>;
pub type Pool32 = moe::ExpertPool<f32>;
