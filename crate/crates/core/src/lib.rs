//! Temporal dependency networks.
//!
//! A sequence of frame features is turned into K learned weighted adjacency
//! matrices (one per dependency structure), the frames are refined by stacked
//! graph-convolution layers over those matrices, and the pooled result feeds
//! a multi-label classifier. Everything is computed in `f64` with explicit
//! reverse-mode gradients.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod representation;
pub mod structure;
pub mod train;
pub mod visualize;

pub use error::{Result, TdnError};
pub use linalg::{Activation, Matrix};
pub use model::{TdnConfig, TdnModel};
