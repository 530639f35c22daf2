//! Multilevel Monte Carlo with branching paths for digital options.
//!
//! Estimates `P(X_1 in S)` for an SDE-driven state `X` by a telescoping sum
//! of level differences, where each level sample averages the payoff
//! difference over the leaves of a tree of Brownian paths that share history
//! up to geometrically spaced branch times.

pub mod branching;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod rng;
pub mod schemes;
pub mod selftest;
pub mod sde_models;

pub use error::{Error, Result};
pub mod estimators;
pub mod mlmc;
