//! Command-line harness for the tactile view-graph classifier: synthetic
//! data, pseudo-viewpoint clustering, two-stage training, evaluation and
//! gradient checking.

pub mod commands;
pub mod config;
pub mod metrics;

#[cfg(feature = "stag")]
pub mod npy;

pub use config::{Overrides, RunConfig};
