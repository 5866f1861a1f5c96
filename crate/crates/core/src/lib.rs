//! Constraint-adaptive policy switching (CAPS) for offline safe reinforcement
//! learning on finite-horizon constrained MDPs.
//!
//! The crate is organised bottom-up:
//!
//! - [`cmdp`]: finite-horizon CMDPs, instance generators and a seeded simulator.
//! - [`oracle`]: exact backward induction, optimal-cost variation, admissibility
//!   and the expected-cost bound check over the (state, accumulated cost) space.
//! - [`dataset`]: offline datasets from behaviour-policy mixtures and their file format.
//! - [`approximator`]: small from-scratch MLPs, a shared-backbone multi-head
//!   policy network, Adam and the loss kernels.
//! - [`trainers`]: IQL-style, SAC+BC-style and tabular CAPS training, BC and FQE.
//! - [`caps`]: the test-time filter / select / fallback decision rule.
//! - [`eval`]: threshold sweeps, normalised metrics and ablation harnesses.

pub mod approximator;
pub mod caps;
pub mod cmdp;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod numfmt;
pub mod oracle;
pub mod rng;
pub mod trainers;

pub use error::{CapsError, Result};
