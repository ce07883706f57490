//! Deep Interest Evolution Network for click-through-rate prediction.
//!
//! The crate is layered bottom-up:
//!
//! - [`numerics`]: dense `f64` vectors/matrices, activations, finite differences
//! - [`embedding`]: id → vector tables with sparse gradients and negative sampling
//! - [`recurrent`]: GRU, target attention, AIGRU/AGRU/AUGRU, hand-derived backward passes
//! - [`model`]: the BaseModel / two-layer-GRU-attention / GRU+evolution / DIEN networks and their losses
//! - [`data`]: instances, the TSV corpus format, review-style instance building, synthetic interest-drift corpora
//! - [`training`]: Adam, the mini-batch loop, gradient checking
//! - [`evaluation`]: AUC, repeated evaluation, PCA and interest-evolution export
//! - [`cli`]: configuration files and the subcommands behind the `dien` binary

pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod recurrent;
pub mod training;

pub use error::{Error, Result};
