use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use super::layers::{BatchNorm1d, Conv1d};

/// Output length after `layers` rounds of floor-halving.
pub fn downsampled_len(steps: usize, layers: usize) -> usize {
    (0..layers).fold(steps, |n, _| n / 2)
}

/// Repeated `[conv(k=3, same) → ReLU → batch norm → dropout → avg-pool(2)]`.
#[derive(Clone, Debug)]
pub struct ConvDownsampleStack {
    pub layers: Vec<(Conv1d, BatchNorm1d)>,
    pub dropout: f64,
}

impl ConvDownsampleStack {
    pub const KERNEL: usize = 3;

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        filters: usize,
        num_layers: usize,
        dropout: f64,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|i| {
                let input = if i == 0 { in_dim } else { filters };
                (
                    Conv1d::new(store, &format!("{name}.{i}.conv"), input, filters, Self::KERNEL),
                    BatchNorm1d::new(store, &format!("{name}.{i}.bn"), filters),
                )
            })
            .collect();
        ConvDownsampleStack { layers, dropout }
    }

    pub fn min_steps(&self) -> usize {
        1 << self.layers.len()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let steps = g.shape(x).0;
        if steps < self.min_steps() {
            return Err(Error::TooShort { context: "conv downsample stack", min: self.min_steps(), got: steps });
        }
        let mut h = x;
        for (conv, bn) in &self.layers {
            h = conv.forward(g, h)?;
            h = g.relu(h);
            h = bn.forward(g, h)?;
            h = g.dropout(h, self.dropout)?;
            h = g.avg_pool2(h)?;
        }
        Ok(h)
    }
}
