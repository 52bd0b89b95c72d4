//! Toy-scale diffusion model compression.
//!
//! The crate trains a small block-structured denoiser on 2D synthetic data,
//! quantizes it with two-stage progressive block reconstruction, and
//! distills the quantized model into a half-step student with a
//! calibration-assisted loss. Every stage is deterministic given a seed.

pub mod cad;
pub mod calib;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod pq;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
