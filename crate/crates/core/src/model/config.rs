use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the conditional denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input height and width (square).
    pub image_size: usize,
    /// Base channel count `L`.
    pub base_channels: usize,
    /// Number of U-Net levels.
    pub depth: usize,
    /// Per-level channel multipliers of `L`; one entry per level.
    pub channel_multipliers: Vec<usize>,
    /// Residual blocks per encoder level (the decoder uses one more, for the downsample skip).
    pub res_blocks: usize,
    /// Spatial sizes at which every residual block is followed by attention.
    pub attention_resolutions: Vec<usize>,
    /// Residual-in-residual dense blocks in the image encoder.
    pub rrdb_blocks: usize,
    /// Growth channels inside each dense block; defaults to `L / 2`.
    pub growth_channels: Option<usize>,
    /// Width `d` of the timestep and consensus embeddings.
    pub embed_dim: usize,
    pub heads: usize,
    /// Rows of the consensus lookup table (`C_max`).
    pub consensus_levels: usize,
    /// Rows of the timestep lookup table (`T`).
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-sized configuration for 32x32 inputs.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            base_channels: 16,
            depth: 4,
            channel_multipliers: vec![1, 1, 2, 2],
            res_blocks: 1,
            attention_resolutions: vec![8, 4],
            rrdb_blocks: 2,
            growth_channels: None,
            embed_dim: 64,
            heads: 4,
            consensus_levels: 3,
            timesteps: 100,
        }
    }

    /// Full-size configuration for 256x256 inputs.
    pub fn full_scale() -> Self {
        Self {
            image_size: 256,
            base_channels: 128,
            depth: 7,
            channel_multipliers: vec![1, 1, 1, 2, 2, 4, 4],
            res_blocks: 2,
            attention_resolutions: vec![16, 8],
            rrdb_blocks: 8,
            growth_channels: None,
            embed_dim: 512,
            heads: 4,
            consensus_levels: 7,
            timesteps: 100,
        }
    }

    pub fn growth(&self) -> usize {
        self.growth_channels.unwrap_or(self.base_channels / 2)
    }

    /// Spatial size at encoder level `lvl`.
    pub fn resolution(&self, lvl: usize) -> usize {
        self.image_size >> lvl
    }

    pub fn level_channels(&self, lvl: usize) -> usize {
        self.channel_multipliers[lvl] * self.base_channels
    }

    pub fn attends_at(&self, lvl: usize) -> bool {
        self.attention_resolutions.contains(&self.resolution(lvl))
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.depth == 0 {
            errs.push("depth must be >= 1".to_string());
        }
        if self.channel_multipliers.len() != self.depth {
            errs.push(format!(
                "channel_multipliers has {} entries but depth is {}",
                self.channel_multipliers.len(),
                self.depth
            ));
        }
        if self.channel_multipliers.contains(&0) {
            errs.push("channel multipliers must be >= 1".to_string());
        }
        if self.base_channels == 0 {
            errs.push("base_channels must be >= 1".to_string());
        }
        if self.growth() == 0 {
            errs.push("growth channels must be >= 1".to_string());
        }
        if self.res_blocks == 0 {
            errs.push("res_blocks must be >= 1".to_string());
        }
        if self.rrdb_blocks == 0 {
            errs.push("rrdb_blocks must be >= 1".to_string());
        }
        if self.embed_dim == 0 {
            errs.push("embed_dim must be >= 1".to_string());
        }
        if self.consensus_levels == 0 {
            errs.push("consensus_levels must be >= 1".to_string());
        }
        if self.timesteps < 2 {
            errs.push(format!("timesteps must be >= 2, got {}", self.timesteps));
        }
        if self.depth > 0 && self.image_size % (1 << (self.depth - 1)) != 0 {
            errs.push(format!(
                "image_size {} not divisible by 2^(depth-1) = {}",
                self.image_size,
                1usize << (self.depth - 1)
            ));
        }
        if self.image_size == 0 {
            errs.push("image_size must be >= 1".to_string());
        }
        if self.channel_multipliers.len() == self.depth && self.depth > 0 {
            let reached: Vec<usize> = (0..self.depth).map(|l| self.resolution(l)).collect();
            for r in &self.attention_resolutions {
                if !reached.contains(r) {
                    errs.push(format!(
                        "attention resolution {r} is not reached by the encoder (levels: {reached:?})"
                    ));
                }
            }
            if self.heads == 0 {
                errs.push("heads must be >= 1".to_string());
            } else {
                let mut attn_channels: Vec<usize> =
                    (0..self.depth).filter(|&l| self.attends_at(l)).map(|l| self.level_channels(l)).collect();
                attn_channels.push(self.level_channels(self.depth - 1));
                for c in attn_channels {
                    if c % self.heads != 0 {
                        errs.push(format!("{c} attention channels not divisible by {} heads", self.heads));
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}
