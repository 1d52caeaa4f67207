#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Configuration-driven experiment runner: data generation, training,
//! probes, reports and plots, with every output hashed into a manifest.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod plot;

pub use config::{parse_config, ExperimentConfig};
pub use error::{Result, Stage, StageError};
pub use pipeline::{execute, Command};
