//! Datasets, synthetic tasks and the experiment pipeline.

mod data;
mod experiment;

pub use data::*;
pub use experiment::*;
