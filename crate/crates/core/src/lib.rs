//! Composed image retrieval with entity-mapping query aggregation.
//!
//! The crate bundles a small reverse-mode autodiff engine, deterministic
//! feature providers, the summary/consistency tooling used during training,
//! the entity-mapping model and its losses, a trainer with checkpoints, and
//! recall-based evaluation.

pub mod autodiff;
pub mod dataset;
pub mod encoders;
pub mod entity_mapping;
pub mod error;
pub mod lexicon;
pub mod objectives;
pub mod parsing;
pub mod retrieval;
pub mod tef;
pub mod trainer;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
