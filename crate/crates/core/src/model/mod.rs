//! Transformer-encoder reconstruction network with input/output adapters.

mod attention;
mod checkpoint;
mod network;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::attention;
pub use checkpoint::{checkpoint_scalar, Checkpoint, OptimizerState, CHECKPOINT_VERSION};
pub use network::{complete_spot, forward, gradients, loss, Batch, ForwardCache};
pub use params::{LayerLayout, LayerNormSlot, Layout, LinearSlot, ModelParameters, TensorInfo};

/// Shape hyper-parameters of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token (model) dimension.
    pub d_k: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Number of genes per token.
    pub genes: usize,
    /// Adds a learned embedding of each token's hop ring (0, 1 or 2).
    #[serde(default)]
    pub ring_embedding: bool,
}

impl ModelConfig {
    pub fn new(genes: usize) -> Self {
        ModelConfig {
            d_k: 128,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 512,
            genes,
            ring_embedding: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_k / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.ffn_dim == 0
            || self.genes == 0
        {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if !self.d_k.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_k = {} is not divisible by num_heads = {}",
                self.d_k, self.num_heads
            )));
        }
        Ok(())
    }
}
