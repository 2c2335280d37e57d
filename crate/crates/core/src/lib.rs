//! Consensus-conditioned diffusion for multi-annotator binary segmentation.
//!
//! Annotator masks are turned into nested consensus maps, a conditional
//! denoising diffusion model learns to generate each consensus level from
//! the image, and per-level samples are averaged into a soft segmentation.

#[cfg(feature = "cli")]
pub mod cli;
pub mod consensus;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod inference;
pub mod maps;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
