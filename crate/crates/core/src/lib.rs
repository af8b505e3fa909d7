//! Multi-scale self-distillation pretraining for slide pyramids, with few-shot
//! adaptation and evaluation tooling.

pub mod adapter;
pub mod config;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod raster;
pub mod views;

pub use error::{Error, Result};
