use serde::{Deserialize, Serialize};

use crate::error::{KamirError, Result};

/// Byte-level vocabulary size. Fixed: tokens are raw bytes.
pub const VOCAB_SIZE: usize = 256;

/// Shape and seed of a [`MiniLmModel`](super::MiniLmModel).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_layers: 4,
            hidden_dim: 64,
            n_heads: 4,
            ffn_dim: 256,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 512,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(KamirError::Config(format!(
                "n_layers must be >= 2 so that at least one layer can be compared \
                 against the last (got {})",
                self.n_layers
            )));
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(KamirError::Config(
                "hidden_dim, n_heads and ffn_dim must be positive".into(),
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(KamirError::Config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(KamirError::Config(format!(
                "vocab_size must be {VOCAB_SIZE} for the byte-level tokenizer (got {})",
                self.vocab_size
            )));
        }
        if self.max_seq_len < 2 {
            return Err(KamirError::Config("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Same shape, ignoring the seed.
    pub fn same_shape(&self, other: &LmConfig) -> bool {
        self.n_layers == other.n_layers
            && self.hidden_dim == other.hidden_dim
            && self.n_heads == other.n_heads
            && self.ffn_dim == other.ffn_dim
            && self.vocab_size == other.vocab_size
            && self.max_seq_len == other.max_seq_len
    }
}

/// Which vector stands in for the last layer when traces are captured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceAnchor {
    /// Residual stream after the last block, before the final layer norm.
    #[default]
    PreFinalNorm,
    /// Output of the final layer norm.
    PostFinalNorm,
}
