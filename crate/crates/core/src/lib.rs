#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod inference;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
