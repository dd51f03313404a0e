use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of the toy decoder-only LM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Longest sequence the model accepts, BOS included.
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 64,
            max_seq_len: 256,
            vocab_size,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.layers == 0 {
            return Err(Error::Config("layers, heads and model_dim must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }
}
