//! Harness around the core library: run configuration, the training loop,
//! checkpointing, evaluation, dataset export and gradient verification.
//! The `pfn` binary is a thin dispatcher over these modules.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradfull;
pub mod train;
