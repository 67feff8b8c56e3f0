//! Deterministic and variational graph convolutional networks.
//!
//! The crate provides a small reverse-mode autodiff engine ([`Tape`],
//! [`Tensor`]), graph preprocessing (adjacency normalization, skeleton
//! partitioning), deterministic and variational GCN/GAT layers for spatial
//! and spatiotemporal inputs, Monte Carlo uncertainty estimation over
//! outputs and attention coefficients, and uncertainty-aware model
//! variants built from trained variational attention models.

pub mod config;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod rng;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tape::Tape;
pub use tensor::Tensor;
