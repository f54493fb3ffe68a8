//! Fractal pyramid networks on a self-contained reverse-mode tensor engine.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation, so it
//! can run inside embedded eval harnesses as well as the regular CLI. IO, file
//! formats and command plumbing live in the companion `pfn-cli` crate.
//!
//! Module map:
//! * [`tensor`] — dense NCHW tensors and their binary wire format
//! * [`engine`] — the gradient graph (forward ops + reverse-mode backward)
//! * [`optim`] — parameter registry, Adam, global gradient clipping
//! * [`arch`] — the recursive fractal builder and its structure report
//! * [`loss`] — photometric / smoothness losses and differentiable warping
//! * [`metrics`] — depth, temporal-consistency and segmentation metrics
//! * [`synth`] — plane-world scene generator with exact ground truth
//! * [`gradcheck`] — finite-difference oracle used by tests and the CLI

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod arch;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use engine::{Gradients, Graph, TensorId};
pub use error::Error;
pub use real::Real;
pub use tensor::{Shape, Tensor};

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
