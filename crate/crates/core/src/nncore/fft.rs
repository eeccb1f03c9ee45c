use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use super::attention::MultiHeadAttention;
use super::layers::{Conv1d, LayerNorm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FftConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub ffn_kernel: usize,
    pub dropout: f64,
}

impl Default for FftConfig {
    fn default() -> Self {
        FftConfig {
            hidden: 256,
            heads: 2,
            ffn_inner: 1024,
            ffn_kernel: 9,
            dropout: 0.1,
        }
    }
}

/// Feed-forward transformer block: self-attention and a two-layer
/// convolutional feed-forward, each followed by residual add and layer norm.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub conv_in: Conv1d,
    pub conv_out: Conv1d,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
}

impl FftBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &FftConfig) -> Result<Self> {
        Ok(FftBlock {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.hidden, cfg.heads)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), cfg.hidden),
            conv_in: Conv1d::new(store, &format!("{name}.ffn.0"), cfg.hidden, cfg.ffn_inner, cfg.ffn_kernel),
            conv_out: Conv1d::new(store, &format!("{name}.ffn.1"), cfg.ffn_inner, cfg.hidden, 1),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), cfg.hidden),
            dropout: cfg.dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let attn = self.attention.forward(g, x, x, x)?.values;
        let attn = g.dropout(attn, self.dropout)?;
        let x = g.add(x, attn)?;
        let x = self.attn_norm.forward(g, x)?;

        let h = self.conv_in.forward(g, x)?;
        let h = g.relu(h);
        let h = self.conv_out.forward(g, h)?;
        let h = g.dropout(h, self.dropout)?;
        let x = g.add(x, h)?;
        self.ffn_norm.forward(g, x)
    }

    /// Runs the block independently over each sequence of a batch.
    pub fn forward_batch<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &[Var]) -> Result<Vec<Var>> {
        batch.iter().map(|&x| self.forward(g, x)).collect()
    }
}
