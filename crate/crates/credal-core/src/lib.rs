//! Core library for credal graph learning: graph containers and operators,
//! a small reverse-mode autodiff engine, GNN backbones with interval-valued
//! credal heads, uncertainty decomposition, OOD baselines, and the training
//! and evaluation machinery that ties them together.
//!
//! Everything is float64 and deterministic: all randomness flows from
//! explicit seeds, iteration orders are fixed, and repeated runs of the same
//! configuration produce byte-identical outputs.

pub mod baselines;
pub mod credal;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod tape;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
