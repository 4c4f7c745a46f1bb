//! Desk-scale graph similarity toolkit.
//!
//! The crate computes graph edit distance exactly on small graphs, learns a
//! neural similarity scorer on top of those exact values, and evaluates the
//! learned scorer as a ranking engine. Everything is deterministic for a
//! fixed seed: dataset generation, parameter initialization, batch order,
//! and evaluation reports reproduce byte for byte.
//!
//! Module map:
//! - [`graph`]: undirected labeled graphs, permutations, featurization.
//! - [`ged`]: exact edit distance via brute force or A* search, plus the
//!   similarity transform and ground-truth tables.
//! - [`autodiff`]: a small tape-based reverse-mode engine over `f64`.
//! - [`model`]: the GNN scorer (GIN encoder, set readout, alignment
//!   regularizer, NTN and Minkowski discriminators).
//! - [`train`]: splits, Adam, the training loop, checkpoints.
//! - [`metrics`]: ranking metrics and the evaluation harness.
//! - [`data`]: dataset file formats and synthetic generation.

pub mod autodiff;
pub mod data;
pub mod ged;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod train;
