//! Patch-sequence image reconstruction with selective state-space models.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod plot;
pub mod probes;
pub mod ssm;
pub mod tensor;
pub mod tokenize;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
