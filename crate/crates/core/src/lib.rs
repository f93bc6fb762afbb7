//! Learned deferral versus uncertainty-based deferral for binary
//! classification: networks, surrogate losses, posterior approximations,
//! metrics and the deferral-rate sweep protocol.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nnet;
pub mod pipelines;
pub mod rng;
pub mod sweep;
pub mod uq;

pub use error::{Error, Result};
