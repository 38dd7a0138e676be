//! Patch-token transformer with a per-layer KV cache that supports
//! recomputing only a subset of visual tokens per step.
//!
//! Each step sees one frame. The frame is cut into `N` patch tokens; a
//! learned readout token is appended and always recomputed, and its final
//! state feeds the action head. Cached visual rows keep their key/value
//! vectors (already rotated at their spatial position) from the step in
//! which they were last computed.

mod attention;
mod cache;
mod checkpoint;
mod model;
mod rotary;

pub use attention::{attend, min_max_normalise, permute_kv_check};
pub use cache::LayerKVCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{Recompute, StepGraph, StepOutput, Transformer};
pub use rotary::{apply_rotary, rotary_tables};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `D`.
    pub dim: usize,
    /// FFN hidden width `M`.
    pub ffn: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of action classes.
    pub vocab: usize,
    /// Pixels per token side.
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            ffn: 256,
            layers: 2,
            heads: 4,
            vocab: 64,
            patch: 4,
            height: 32,
            width: 32,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    /// Visual tokens per frame, `N`.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Values per flattened patch (three channels).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "frame {}×{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!("head dim {} must be even for rotary pairs", self.head_dim())));
        }
        if self.layers == 0 || self.ffn == 0 || self.vocab == 0 {
            return Err(Error::config("layers, ffn and vocab must be positive"));
        }
        Ok(())
    }
}
