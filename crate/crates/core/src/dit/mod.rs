//! Toy diffusion transformer with interleaved spatial and temporal attention.
//!
//! Input assembly stacks the noised video and noised reference frames along
//! time, appends clean reference latents as condition channels (zero on video
//! positions) and a binary flag plane marking reference positions. Spatial
//! blocks attend over one temporal position's patches plus all text tokens;
//! temporal blocks attend along time per patch location, within windows of
//! `temporal_window` video frames, with every reference token visible to
//! every window.

mod forward;
mod input;
mod lora;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Vocab, WorldConfig, CHANNELS};

pub use forward::{
    forward, forward_with, rope_positions, temporal_mask, BlockKind, ForwardOptions,
};
pub use input::{assemble_input, assemble_state, Conditioning, ModelInput};
pub use lora::{
    apply_delta, apply_lora, merge_loras, DeltaView, DenseDelta, LoraAdapter, LoraFactor,
    LoraParams, LoraView,
};
pub use weights::{ModelWeights, WeightSource};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub temporal_window: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub rope_base: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self::for_world(&WorldConfig::default())
    }
}

impl DitConfig {
    pub fn for_world(world: &WorldConfig) -> Self {
        Self {
            depth: 4,
            hidden: 64,
            heads: 4,
            patch: 2,
            temporal_window: 4,
            mlp_ratio: 4,
            vocab_size: Vocab::default().len(),
            max_text_len: 64,
            channels: CHANNELS,
            height: world.height,
            width: world.width,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.depth == 0 {
            bad.push("depth must be >= 1".to_string());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            bad.push(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        } else if (self.hidden / self.heads) % 2 != 0 {
            bad.push("head dim must be even for rotary embeddings".to_string());
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            bad.push(format!(
                "frame {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.temporal_window == 0 {
            bad.push("temporal_window must be >= 1".to_string());
        }
        if self.hidden % 2 != 0 {
            bad.push("hidden must be even".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(bad))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Input channels per patch: noised, condition and flag planes.
    pub fn patch_in(&self) -> usize {
        (2 * self.channels + 1) * self.patch * self.patch
    }

    pub fn patch_out(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn block_kind(&self, i: usize) -> BlockKind {
        if i % 2 == 0 {
            BlockKind::Spatial
        } else {
            BlockKind::Temporal
        }
    }

    /// Matrices LoRA adapters may target.
    pub fn lora_targets(&self) -> Vec<String> {
        let mut t = vec!["patch_embed".to_string()];
        for i in 0..self.depth {
            for m in ["attn.qkv", "attn.out", "mlp.fc1", "mlp.fc2"] {
                t.push(format!("blocks.{i}.{m}"));
            }
        }
        t.push("final.proj".to_string());
        t
    }
}
