//! Experiment orchestration for the predictive-coding network: training
//! stages, evaluation runs and their CSV outputs.

pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;

pub use config::{ExperimentConfig, Profile};
pub use pipeline::Context;
