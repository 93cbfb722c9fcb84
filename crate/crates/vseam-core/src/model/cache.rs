//! Captured activations from one forward pass.

use ndarray::{Array2, Array3};

use crate::error::{Result, VseamError};
use crate::model::ModuleKind;

/// Activations captured during a forward pass.
///
/// `module_state(l, tau)` is the residual-stream state after module `tau`
/// of layer `l` (attention: after the attention contribution is added;
/// mlp: after the full block). Patching a row of this state and resuming
/// the forward pass from that point is therefore exactly equivalent to
/// splicing the donor run's stream.
///
/// Per-head outputs are captured before the attention output projection,
/// which is the only point where a single head's output embedding is
/// well-defined.
///
/// Caches are immutable after capture and cheap to share behind `Arc`.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    seq_len: usize,
    hidden_dim: usize,
    head_dim: usize,
    embedding: Array2<f64>,
    att_state: Vec<Array2<f64>>,
    mlp_state: Vec<Array2<f64>>,
    head_outputs: Vec<Vec<Array2<f64>>>,
    attention: Option<Vec<Array3<f64>>>,
}

impl ActivationCache {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        seq_len: usize,
        hidden_dim: usize,
        head_dim: usize,
        embedding: Array2<f64>,
        att_state: Vec<Array2<f64>>,
        mlp_state: Vec<Array2<f64>>,
        head_outputs: Vec<Vec<Array2<f64>>>,
        attention: Option<Vec<Array3<f64>>>,
    ) -> Self {
        ActivationCache {
            seq_len,
            hidden_dim,
            head_dim,
            embedding,
            att_state,
            mlp_state,
            head_outputs,
            attention,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn num_layers(&self) -> usize {
        self.att_state.len()
    }

    pub fn num_heads(&self) -> usize {
        self.head_outputs.first().map_or(0, Vec::len)
    }

    /// Residual stream before layer 0 (token + position embeddings).
    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    /// Residual stream entering layer `layer`.
    pub fn residual_before(&self, layer: usize) -> &Array2<f64> {
        if layer == 0 {
            &self.embedding
        } else {
            &self.mlp_state[layer - 1]
        }
    }

    /// `T x d` residual state after module `tau` of `layer`.
    pub fn module_state(&self, layer: usize, tau: ModuleKind) -> &Array2<f64> {
        match tau {
            ModuleKind::Attention => &self.att_state[layer],
            ModuleKind::Mlp => &self.mlp_state[layer],
        }
    }

    /// What the attention module added to the residual stream at `layer`.
    pub fn attention_contribution(&self, layer: usize) -> Array2<f64> {
        &self.att_state[layer] - self.residual_before(layer)
    }

    /// `T x d_h` output of head `head` at `layer`, pre output projection.
    pub fn head_output(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.head_outputs[layer][head]
    }

    pub fn head_outputs(&self, layer: usize) -> &[Array2<f64>] {
        &self.head_outputs[layer]
    }

    /// `H x T x T` post-softmax attention weights at `layer`, if captured.
    pub fn attention_weights(&self, layer: usize) -> Result<&Array3<f64>> {
        self.attention
            .as_ref()
            .map(|a| &a[layer])
            .ok_or(VseamError::AttentionNotCaptured)
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }
}
