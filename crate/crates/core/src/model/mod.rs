//! The conditional noise-prediction network.
//!
//! The mask at step `t` is lifted to `L` channels by a single convolution
//! `F` and summed with the image features `G(I)` from an RRDB encoder. The
//! sum runs through a U-Net (`E`, `D`) whose residual blocks receive the
//! combined embedding `z_t + z_c`. Skip connections are concatenated.

mod checkpoint;
mod config;
mod net;
mod params;

pub use checkpoint::{sha256_hex, Checkpoint, OptimizerSnapshot, FORMAT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use net::{LayerTrace, Net};
pub use params::{init_model, ModelParams};
