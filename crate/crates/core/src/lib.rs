//! Desk-scale diffusion lab: trains small unconditional denoising diffusion
//! models on grayscale image sets, extracts frozen decoder features over a
//! (timestep x readout) grid, and evaluates them with linear probes and
//! clustering diagnostics.

pub mod cluster;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod imageio;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod schedule;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
