//! The segmentation-conditioned causal policy.
//!
//! Each frame is fused with its object mask as a four-channel image, encoded by
//! a patch backbone and pooled to one vector by learned attention. A causal
//! transformer over up to `context_len` such tokens, with the interaction type
//! added as a learned embedding, predicts a factored action.

mod checkpoint;
mod context;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Parameter precision, re-exported so callers need not depend on candle.
pub use candle_core::DType;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use context::{ActMode, PolicyContext};
pub use model::{mask_tensor, obs_tensor, ActionDistribution, FrameToken, Policy};
pub use train::{
    bc_loss, bc_loss_tensors, dropout_weights, evaluate_split, train, unconditioned_loss,
    EpochMetrics, TrainConfig, TrainOutcome,
};

/// Where the interaction type joins the observation stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Binary mask in the image; type added as an embedding at the transformer input.
    #[default]
    TransformerLayer,
    /// Mask pixels carry the type code in the image; no type embedding.
    VisualBackbone,
}

impl Fusion {
    pub const ALL: [Fusion; 2] = [Fusion::TransformerLayer, Fusion::VisualBackbone];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::TransformerLayer => "transformer_layer",
            Fusion::VisualBackbone => "visual_backbone",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config(format!("unknown fusion variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub image_size: usize,
    /// Side of the square, non-overlapping patches of the first convolution.
    pub patch_size: usize,
    /// Channels of the per-patch backbone features.
    pub patch_dim: usize,
    pub hidden_dim: usize,
    pub pool_heads: usize,
    pub transformer_blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub context_len: usize,
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub fusion: Fusion,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            patch_size: 8,
            patch_dim: 128,
            hidden_dim: 256,
            pool_heads: 8,
            transformer_blocks: 4,
            heads: 4,
            ffn_mult: 2,
            context_len: 128,
            dropout_p: 0.75,
            learning_rate: 4e-5,
            weight_decay: 0.01,
            fusion: Fusion::TransformerLayer,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(config(
                "image_size must be a positive multiple of patch_size",
            ));
        }
        if self.hidden_dim == 0 || self.patch_dim == 0 {
            return Err(config("layer widths must be positive"));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(config("hidden_dim must be divisible by heads"));
        }
        if self.pool_heads == 0 || !self.hidden_dim.is_multiple_of(self.pool_heads) {
            return Err(config("hidden_dim must be divisible by pool_heads"));
        }
        if self.transformer_blocks == 0 || self.ffn_mult == 0 || self.context_len == 0 {
            return Err(config(
                "transformer_blocks, ffn_mult and context_len must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(config(format!(
                "dropout_p {} outside [0, 1]",
                self.dropout_p
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(config("learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }
}
