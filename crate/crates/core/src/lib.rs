//! Causal conditional hidden Markov model for multimodal traffic forecasting.

pub mod cli;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod graphops;
pub mod model;
pub mod objective;
pub mod optim;

pub use error::{Error, Result};
