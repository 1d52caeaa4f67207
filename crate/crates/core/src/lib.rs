#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod export;
pub mod metrics;
pub mod mixtures;
pub mod models;
pub mod objectives;
pub mod probes;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
