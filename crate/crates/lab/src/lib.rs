//! Experiment harness around `gradleak-core`: dataset loaders, TOML
//! experiment configs, victim attacks and report files.

pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod report;

pub use error::{LabError, Result};
