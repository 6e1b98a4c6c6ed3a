//! Optimistic actor-critic for finite-horizon linear MDPs.
//!
//! The critic draws approximate posterior samples of the value weights with
//! Langevin Monte Carlo and takes an optimistic max over chains; the actor
//! performs natural policy gradient steps projected onto a log-linear class
//! through a weighted logit-matching regression on a G-optimal coreset.

pub mod actor;
pub mod critic;
pub mod design;
pub mod dp;
pub mod envs;
pub mod error;
pub mod linalg;
pub mod mdp;
pub mod policy;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub mod harness;
