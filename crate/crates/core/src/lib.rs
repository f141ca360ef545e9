//! Tabular model-based offline meta-reinforcement learning with regularized
//! policy optimization.
//!
//! Everything runs on finite MDPs so true policy returns come from dynamic
//! programming and every safety claim can be checked exactly.

// Validation compares with negated operators on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod mdp;
pub mod merpo;
pub mod model;
pub mod rac;
pub mod rng;
pub mod tasks;
pub mod textio;
pub mod theory;

pub use error::{MerpoError, Result};
pub use mdp::{MarginalDist, QTable, StochasticPolicy, TabularMdp};
