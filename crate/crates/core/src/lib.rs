//! Off-policy evaluation of ranking policies whose logged rankings were
//! post-processed by business rules.
//!
//! Rankings are randomized with a Birkhoff–von Neumann decomposition of a
//! propensity matrix before [`rules`] pin items in place. Because every randomizing permutation is known, [`correction`]
//! recovers the display probabilities the rules actually produced, which the
//! [`estimators`] then use for PBM, IPM and INTERPOL estimates.

pub mod bvn;
pub mod correction;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod log;
pub mod matching;
pub mod par;
pub mod position_bias;
pub mod ranking;
pub mod rng;
pub mod rules;
pub mod simulator;

pub use error::{OpeError, Result};
