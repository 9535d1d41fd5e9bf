//! Sparse graphical memory for goal-conditioned navigation.
//!
//! A replay buffer of exploration states is condensed into a small directed
//! graph by merging states that are interchangeable both as starting points
//! and as goals under an asymmetric distance (two-way consistency). The graph
//! is then used as a high-level planner whose faulty edges are repaired by
//! executing plans and deleting transitions the controller cannot make.
//!
//! Module map:
//!
//! - [`maze`]: point-mass maze simulator and geodesic oracle.
//! - [`distance`]: distance functions and perceptual embeddings.
//! - [`memory`]: the graph, TWC scores and merge tests.
//! - [`builder`]: one-pass graph construction and baselines.
//! - [`planner`]: localization and Dijkstra plans.
//! - [`agent`]: hierarchical execution and cleanup.
//! - [`verify`]: empirical checks of the path-length gap bound.
//! - [`bench`]: experiment harness producing CSV tables.
//! - [`config`]: experiment configuration files.

pub mod agent;
pub mod bench;
pub mod builder;
pub mod config;
pub mod distance;
pub mod error;
mod heap;
pub mod maze;
pub mod memory;
pub mod planner;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
