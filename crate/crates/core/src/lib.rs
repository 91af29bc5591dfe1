//! Distributional long-term engagement values from logged recommendation
//! sessions.
//!
//! - [`simenv`]: synthetic session environment, log generation, Monte Carlo returns
//! - [`distdp`]: exact tabular distributional DP on quantile representations
//! - [`qrlearn`]: quantile + termination learner with a target network
//! - [`ranker`]: engagement scores and blended rankings
//! - [`dataio`]: file formats, transition assembly, minibatching

pub mod dataio;
pub mod distdp;
mod error;
pub mod qrlearn;
pub mod ranker;
pub mod simenv;

pub use error::{Error, Result};
