//! Configuration, checkpoints, metrics export and experiment dispatch.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod run;
