use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tokenizer::{DEFAULT_LABEL_COUNT, SPECIAL_COUNT};

/// Size of the static character vocabulary used by the context-free baseline.
pub const BASELINE_CHARS: usize = 26;
/// `<bos>`, `<eos>`, `<pad>` after the baseline's characters.
pub const BASELINE_SPECIALS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Context and query patches are concatenated before embedding.
    Paired,
    /// Query image only (OCR baseline).
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub vit_layers: usize,
    pub vit_dim: usize,
    pub vit_heads: usize,
    pub dec_layers: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    /// Number of label tokens (contextual) or static characters (baseline).
    pub label_count: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub fusion: Fusion,
    pub rope_base: f64,
    pub init_std: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn desk() -> Self {
        ModelConfig {
            patch_size: 14,
            vit_layers: 2,
            vit_dim: 64,
            vit_heads: 4,
            dec_layers: 2,
            dec_dim: 96,
            dec_heads: 4,
            mlp_ratio: 4,
            label_count: DEFAULT_LABEL_COUNT,
            vocab_size: DEFAULT_LABEL_COUNT + SPECIAL_COUNT,
            max_seq_len: 1024,
            fusion: Fusion::Paired,
            rope_base: 10_000.0,
            init_std: 0.02,
            precision: Precision::F32,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            vit_layers: 1,
            vit_dim: 16,
            vit_heads: 2,
            dec_layers: 1,
            dec_dim: 24,
            dec_heads: 2,
            mlp_ratio: 2,
            precision: Precision::F64,
            ..ModelConfig::desk()
        }
    }

    /// Context-free OCR baseline with the same dimensions as `self`.
    pub fn baseline_of(&self) -> Self {
        ModelConfig {
            fusion: Fusion::Single,
            label_count: BASELINE_CHARS,
            vocab_size: BASELINE_CHARS + BASELINE_SPECIALS,
            ..self.clone()
        }
    }

    pub fn vit_head_dim(&self) -> usize {
        self.vit_dim / self.vit_heads
    }

    pub fn dec_head_dim(&self) -> usize {
        self.dec_dim / self.dec_heads
    }

    /// Input width of one (fused) patch.
    pub fn patch_in(&self) -> usize {
        let frames = match self.fusion {
            Fusion::Paired => 2,
            Fusion::Single => 1,
        };
        frames * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.patch_size == 0 || self.vit_heads == 0 || self.dec_heads == 0 || self.mlp_ratio == 0 {
            return bad("patch_size, head counts and mlp_ratio must be positive".into());
        }
        if self.vit_dim % self.vit_heads != 0 || self.dec_dim % self.dec_heads != 0 {
            return bad("model widths must be divisible by their head counts".into());
        }
        // 2D rotary splits each head into row and column halves of rotation pairs
        if self.vit_head_dim() % 4 != 0 {
            return bad(format!("vit head dim {} must be a multiple of 4", self.vit_head_dim()));
        }
        if self.dec_head_dim() % 2 != 0 {
            return bad(format!("decoder head dim {} must be even", self.dec_head_dim()));
        }
        let expected = match self.fusion {
            Fusion::Paired => self.label_count + SPECIAL_COUNT,
            Fusion::Single => self.label_count + BASELINE_SPECIALS,
        };
        if self.vocab_size != expected {
            return bad(format!("vocab_size {} != {expected}", self.vocab_size));
        }
        if self.max_seq_len < 8 {
            return bad("max_seq_len too small".into());
        }
        Ok(())
    }

    /// Serialized form stored in checkpoint headers.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
