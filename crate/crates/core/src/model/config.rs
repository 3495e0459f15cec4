use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::fnv1a;

/// Architecture of the miniature vision-language-action transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Transformer block count.
    pub layers: usize,
    /// Embedding width shared by both encoders and the backbone.
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Longest admissible sequence, visual tokens included.
    pub max_len: usize,
    /// Side of a square image patch, in pixels.
    pub patch: usize,
    /// Side of the square input image, in pixels.
    pub grid: usize,
    pub channels: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            width: 64,
            heads: 4,
            vocab: 96,
            max_len: 32,
            patch: 2,
            grid: 8,
            channels: 3,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    /// Number of visual tokens, `(grid / patch)^2`.
    pub fn visual_tokens(&self) -> usize {
        let side = self.grid / self.patch.max(1);
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn ffn_width(&self) -> usize {
        self.width * self.ffn_mult
    }

    /// Longest text-plus-action suffix that fits after the visual tokens.
    pub fn max_text_len(&self) -> usize {
        self.max_len.saturating_sub(self.visual_tokens())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return bad("model.layers must be >= 1".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "model.width ({}) must be a positive multiple of model.heads ({})",
                self.width, self.heads
            ));
        }
        if self.patch == 0 || self.grid == 0 || self.grid % self.patch != 0 {
            return bad(format!(
                "model.grid ({}) must be a positive multiple of model.patch ({})",
                self.grid, self.patch
            ));
        }
        if self.channels == 0 || self.ffn_mult == 0 {
            return bad("model.channels and model.ffn_mult must be >= 1".into());
        }
        if self.max_len <= self.visual_tokens() {
            return bad(format!(
                "model.max_len ({}) must exceed the visual token count ({})",
                self.max_len,
                self.visual_tokens()
            ));
        }
        Ok(())
    }

    /// Checks the vocabulary covers every token a task generator can emit.
    pub fn validate_vocab(&self, required: usize) -> Result<()> {
        if self.vocab < required {
            return Err(Error::Config(format!(
                "model.vocab ({}) is smaller than the {} task tokens",
                self.vocab, required
            )));
        }
        Ok(())
    }

    /// Stable digest of the architecture, embedded in checkpoints.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serialises");
        fnv1a(&json)
    }
}
