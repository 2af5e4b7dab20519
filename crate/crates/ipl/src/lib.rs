//! Offline preference-based reinforcement learning without a reward network.
//!
//! A Q-function trained on pairwise preferences induces an implicit reward
//! through the inverse soft-Bellman operator r_Q = Q - gamma E[V]; fitting
//! that implicit reward to expert preferences (plus an L2 regularizer that
//! makes the optimum unique) removes the separately-learned reward model of
//! two-phase preference RL. This crate implements the algorithm with XQL,
//! IQL, and AWAC value backends, the explicit-reward and DPO baselines, and
//! exact tabular oracles (convex r* solver, bijection verifier) that check
//! its convergence guarantees end to end.
//!
//! Start from the runnable examples (`cargo run --example ...`) or the `ipl`
//! binary for the config-driven pipeline.

pub mod approx;
pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod ipl;
pub mod mdp;
pub mod metrics;
pub mod oracle;
mod util;

pub use error::{Error, Result};
