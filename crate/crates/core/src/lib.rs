//! Entropy-regularized linear Q-learning on Markovian samples: exact
//! finite-instance oracles, the stochastic-approximation runner, and the
//! CLT diagnostics built on top of them.

// `!(x > 0.0)` is the idiom used to reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clt;
pub mod error;
pub mod experiment;
pub mod features;
pub mod linalg;
pub mod mdp;
pub mod oracle;
pub mod parallel;
pub mod sa;

pub use error::{Error, Result};
