//! Future-state density estimation by recursive binary classification.
//!
//! A classifier is trained to tell states drawn from a policy's discounted
//! future apart from states drawn from the data marginal; its odds times the
//! marginal give the discounted future-state density. The crate provides the
//! Monte Carlo, temporal-difference and mixed variants of that classifier
//! loss, the hindsight-relabeled Q-learning baseline it is compared against,
//! exact tabular operators, and analytic ground truth on small Markov chains.

pub mod analytic;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod learners;
pub mod mdp;
pub mod net;
pub mod rng;

pub use error::{Error, Result};

/// Library version, echoed into every experiment output directory.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
