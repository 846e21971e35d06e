//! Finite-horizon equalized-recovery state estimation for linear time-varying
//! systems whose measurements are delayed or lost according to a fixed-length
//! delay language.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod language;
pub mod lp;
pub mod model;
pub mod rows;
pub mod sim;
pub mod synthesis;

pub use error::{Error, Result};
