use std::rc::Rc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

/// Affine map `x W + b` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.xavier(format!("{name}.weight"), in_dim, out_dim, in_dim, out_dim);
        let bias = store.zeros(format!("{name}.bias"), 1, out_dim);
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let cols = g.shape(x).1;
        if cols != self.in_dim {
            return Err(Error::Shape { context: "linear", axis: "hidden_dim", expected: self.in_dim, got: cols });
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// 1-D convolution over the time axis with symmetric ("same") padding.
/// The weight is stored unfolded as `(kernel * in_dim, out_dim)`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel >= 1, "kernel must be positive");
        let fan_in = in_dim * kernel;
        let weight = store.xavier(format!("{name}.weight"), fan_in, out_dim, fan_in, out_dim);
        let bias = store.zeros(format!("{name}.bias"), 1, out_dim);
        Conv1d { weight, bias, in_dim, out_dim, kernel }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let cols = g.shape(x).1;
        if cols != self.in_dim {
            return Err(Error::Shape { context: "conv1d", axis: "channels", expected: self.in_dim, got: cols });
        }
        let cols = if self.kernel == 1 {
            x
        } else {
            g.im2col(x, self.kernel, (self.kernel - 1) / 2)
        };
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(cols, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.ones(format!("{name}.gamma"), 1, dim),
            beta: store.zeros(format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, T::lit(Self::EPS))
    }
}

/// Batch normalization over the time axis with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm1d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        BatchNorm1d {
            gamma: store.ones(format!("{name}.gamma"), 1, dim),
            beta: store.zeros(format!("{name}.beta"), 1, dim),
            running_mean: store.buffer(format!("{name}.running_mean"), Array2::zeros((1, dim))),
            running_var: store.buffer(format!("{name}.running_var"), Array2::ones((1, dim))),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(x, gamma, beta, self.running_mean, self.running_var, T::lit(Self::EPS))
    }
}

/// Lookup table mapping integer ids to rows.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, vocab: usize, dim: usize) -> Self {
        let table = store.normal(format!("{name}.table"), vocab, dim, (1.0 / dim as f64).sqrt());
        Embedding { table, vocab, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::UnknownPhoneme { id, vocab: self.vocab });
        }
        let table = g.param(self.table);
        g.gather_rows(table, Rc::new(ids.to_vec()))
    }
}

/// Standard sinusoidal position table of shape `(steps, dim)`.
pub fn sinusoid_positions<T: Scalar>(steps: usize, dim: usize) -> Array2<T> {
    Array2::from_shape_fn((steps, dim), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
