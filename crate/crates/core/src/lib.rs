//! Confidence-aware pixel-wise regression.
//!
//! A small reverse-mode autodiff engine, a dual-head encoder-decoder network,
//! the sorted-error confidence labeler and losses, baseline objectives,
//! a procedural raster generator and the evaluation metrics. Pure
//! computation only; file formats and the command line live in the `care`
//! crate.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod model;
mod kernels;
pub mod loss;
pub mod optim;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
