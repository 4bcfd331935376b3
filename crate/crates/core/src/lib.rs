//! Teacher-student training for cold-start item recommendation on implicit
//! feedback, built on LightGCN propagation.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generation;
pub mod graph;
pub mod losses;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
