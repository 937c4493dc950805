//! Convolutional denoiser `ε_θ(x_k, cond, k)` with a hand-written reverse
//! mode, Adam and checkpoints.

mod graph;
mod model;
mod params;

pub use graph::{Shape, Tape, Var};
pub use model::{init_params, Batch, Denoiser};
pub use params::{Gradients, NormStats, Param, ParamId, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channels of the noised target.
    pub in_channels: usize,
    /// Condition channels, not counting the null flag added internally.
    pub cond_channels: usize,
    pub base_width: usize,
    /// Number of resolution stages; stage `i` has width
    /// `base_width * channel_mult[i]`.
    pub depth: usize,
    pub channel_mult: Vec<usize>,
    pub kernel: usize,
    pub groups: usize,
    pub time_embed_dim: usize,
    pub attention: bool,
    /// Largest valid diffusion step `K`.
    pub diffusion_steps: usize,
    /// The network output is a residual added to `√(1−ᾱ_k)·x_k` to form
    /// the noise estimate.
    #[serde(default)]
    pub prior_skip: bool,
}

impl DenoiserConfig {
    pub fn desk(in_channels: usize, cond_channels: usize) -> Self {
        Self {
            in_channels,
            cond_channels,
            base_width: 8,
            depth: 2,
            channel_mult: vec![1, 2],
            kernel: 3,
            groups: 4,
            time_embed_dim: 32,
            attention: false,
            diffusion_steps: 1000,
            prior_skip: true,
        }
    }

    /// Full-scale architecture (initial dimension 128, multipliers 1,2,4,8).
    pub fn full_scale(in_channels: usize, cond_channels: usize) -> Self {
        Self {
            base_width: 128,
            depth: 4,
            channel_mult: vec![1, 2, 4, 8],
            groups: 8,
            time_embed_dim: 128,
            attention: true,
            ..Self::desk(in_channels, cond_channels)
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_width).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            bail!(Config, "in_channels must be positive");
        }
        if self.depth == 0 {
            bail!(Config, "depth must be at least 1");
        }
        if self.channel_mult.len() != self.depth || self.channel_mult.contains(&0) {
            bail!(
                Config,
                "channel_mult needs {} positive entries, got {:?}",
                self.depth,
                self.channel_mult
            );
        }
        if self.groups == 0 || self.base_width == 0 || self.base_width % self.groups != 0 {
            bail!(
                Config,
                "base_width {} not divisible by {} norm groups",
                self.base_width,
                self.groups
            );
        }
        if self.kernel % 2 == 0 {
            bail!(Config, "kernel size must be odd, got {}", self.kernel);
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            bail!(Config, "time_embed_dim must be even and at least 2");
        }
        if self.diffusion_steps == 0 {
            bail!(Config, "diffusion_steps must be positive");
        }
        Ok(())
    }
}
