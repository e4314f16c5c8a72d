use serde::{Deserialize, Serialize};

use crate::answer::{self, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest sequence (visual + prompt + answer) the position table covers.
    pub max_seq_len: usize,
    /// Patch grid side `G`; the image yields `G²` visual tokens.
    pub grid_side: usize,
    /// Pixels per patch side after any pooling.
    pub patch_side: usize,
    /// Low-rank adapter rank; 0 disables adapters.
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    /// Cap on visual tokens; images larger than the budget are pooled down.
    pub max_visual_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            max_seq_len: 128,
            grid_side: 8,
            patch_side: 4,
            adapter_rank: 8,
            adapter_alpha: 16.0,
            max_visual_tokens: 64,
        }
    }
}

impl ModelConfig {
    /// Tiny dimensions for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            vocab_size: Vocab::NUM_DEFINED as usize,
            max_seq_len: 48,
            grid_side: 2,
            patch_side: 2,
            adapter_rank: 2,
            adapter_alpha: 2.0,
            max_visual_tokens: 4,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn image_side(&self) -> usize {
        self.grid_side * self.patch_side
    }

    pub fn adapter_scale(&self) -> f64 {
        if self.adapter_rank == 0 {
            0.0
        } else {
            self.adapter_alpha / self.adapter_rank as f64
        }
    }

    /// Sequence length for the default prompt and fixed-format answer.
    pub fn default_seq_len(&self) -> usize {
        self.num_patches() + answer::default_prompt().len() + answer::answer_len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_layers, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.grid_side == 0 || self.patch_side == 0 {
            return fail("grid_side and patch_side must be positive".into());
        }
        if self.num_patches() > self.max_visual_tokens {
            return fail(format!(
                "grid of {} patches exceeds max_visual_tokens {}",
                self.num_patches(),
                self.max_visual_tokens
            ));
        }
        if self.max_visual_tokens > self.max_seq_len {
            return fail(format!(
                "max_visual_tokens {} exceeds max_seq_len {}",
                self.max_visual_tokens, self.max_seq_len
            ));
        }
        if self.vocab_size < Vocab::NUM_DEFINED as usize {
            return fail(format!(
                "vocab_size {} smaller than the {} defined tokens",
                self.vocab_size,
                Vocab::NUM_DEFINED
            ));
        }
        if self.adapter_rank > 0 && !(self.adapter_alpha.is_finite() && self.adapter_alpha > 0.0) {
            return fail("adapter_alpha must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        assert!(ModelConfig::toy().default_seq_len() <= ModelConfig::toy().max_seq_len);
        assert!(ModelConfig::default().default_seq_len() <= ModelConfig::default().max_seq_len);
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            max_visual_tokens: 16,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            max_visual_tokens: 200,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
