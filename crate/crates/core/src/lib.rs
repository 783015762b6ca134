//! Reputation-constrained block propagation routing.
//!
//! The crate models how a freshly mined block travels through a miner network:
//!
//! * [`aob`]: Age-of-Block closed form, fork probability and a discrete-event
//!   oracle for the underlying queue.
//! * [`reputation`]: subjective-logic opinions and miner reputations.
//! * [`network`]: instances, Shannon-rate propagation times and trajectory
//!   evaluation.
//! * [`policy`]: the attention encoder-decoder routing policy.
//! * [`trainer`]: REINFORCE with a greedy-rollout baseline.
//! * [`baselines`]: Greedy and Gossip route constructors.
//! * [`experiment`]: sweeps, renders and ablations that emit CSV and SVG.

pub mod aob;
pub mod baselines;
pub mod config;
pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod network;
pub mod policy;
pub mod reputation;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
