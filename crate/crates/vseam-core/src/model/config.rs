//! Toy model configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VseamError};

/// Dimensions of the bundled toy VLM.
///
/// The defaults give a 4-layer, 4-head decoder with a 4x4 grid of image
/// tokens, small enough that brute-force oracles over every layer, head,
/// and position run in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub image_token_count: usize,
    pub max_seq_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 32,
            head_dim: 8,
            vocab_size: 64,
            image_token_count: 16,
            max_seq_len: 64,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads * self.head_dim != self.hidden_dim {
            return Err(VseamError::InvalidDimensions {
                heads: self.num_heads,
                head_dim: self.head_dim,
                hidden: self.hidden_dim,
            });
        }
        Ok(())
    }

    /// Width of the MLP hidden layer.
    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}
