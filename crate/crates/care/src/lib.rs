//! File formats and command-line driver for confidence-aware density regression.

mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod maps;
pub mod report;

pub use error::{Error, Result};
