//! Bandwidth-constrained cooperative perception testbed.

pub mod autograd;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
