//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on the tape is a 2-D array. Sequences are `(time, hidden)`,
//! vectors are `(1, n)` rows and scalars are `(1, 1)`.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running-statistics update emitted by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct NormStatUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Array1<T>,
    pub batch_var: Array1<T>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Array2<T>),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
        batch_stats: bool,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Im2Col {
        x: Var,
        kernel: usize,
        pad_left: usize,
    },
    AvgPool2(Var),
    RowMix(Var, Rc<Array2<T>>),
    GatherRows(Var, Rc<Vec<usize>>),
    Sum(Var),
    Mean(Var),
    NeighborAttention {
        values: Var,
        src: Var,
        dst: Var,
        neighbors: Rc<Vec<Vec<usize>>>,
        alpha: Vec<Vec<T>>,
        slope: T,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Option<Array2<T>>,
    needs_grad: bool,
}

/// Computation tape for one forward pass.
pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: Option<ChaCha8Rng>,
    stat_updates: Vec<NormStatUpdate<T>>,
}

fn sorted_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().fold(T::zero(), |acc, &v| acc + v)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p, T: Scalar> Graph<'p, T> {
    /// Evaluation-mode graph: dropout disabled, normalization uses running statistics.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(512),
            param_vars: HashMap::new(),
            training: false,
            rng: None,
            stat_updates: Vec::new(),
        }
    }

    /// Training-mode graph; `rng` drives dropout masks.
    pub fn training(store: &'p ParamStore<T>, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        g.training = true;
        g.rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(value)) => value,
            _ => unreachable!("non-param node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn take_stat_updates(&mut self) -> Vec<NormStatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, op: Op<T>, value: Array2<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(value),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked, for sensitivity analysis.
    pub fn variable(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(value),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let needs_grad = self.store.is_trainable(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn check_same(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::Shape { context, axis: "rows", expected: ra, got: rb });
        }
        if ca != cb {
            return Err(Error::Shape { context, axis: "cols", expected: ca, got: cb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ka) = self.shape(a);
        let (kb, _) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape { context: "matmul", axis: "inner", expected: ka, got: kb });
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ka) = self.shape(a);
        let (_, kb) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape { context: "matmul_nt", axis: "inner", expected: ka, got: kb });
        }
        let value = self.value(a).dot(&self.value(b).t());
        Ok(self.push(Op::MatMulNt(a, b), value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(Op::Sub(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    /// Adds a `(1, n)` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.shape(a);
        let (r, m) = self.shape(row);
        if r != 1 || m != n {
            return Err(Error::Shape { context: "add_row", axis: "cols", expected: n, got: m });
        }
        let value = self.value(a) + self.value(row);
        Ok(self.push(Op::AddRow(a, row), value, &[a, row]))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.shape(a);
        let (r, m) = self.shape(row);
        if r != 1 || m != n {
            return Err(Error::Shape { context: "mul_row", axis: "cols", expected: n, got: m });
        }
        let value = self.value(a) * self.value(row);
        Ok(self.push(Op::MulRow(a, row), value, &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).mapv(|v| v * factor);
        self.push(Op::Scale(a, factor), value, &[a])
    }

    /// Elementwise product with a fixed array.
    pub fn mul_const(&mut self, a: Var, mask: Array2<T>) -> Result<Var> {
        if self.shape(a) != mask.dim() {
            return Err(Error::Shape {
                context: "mul_const",
                axis: "elements",
                expected: self.value(a).len(),
                got: mask.len(),
            });
        }
        let value = self.value(a) * &mask;
        Ok(self.push(Op::MulConst(a, mask), value, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu(a), value, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).mapv(|v| if v > T::zero() { v } else { v * slope });
        self.push(Op::LeakyRelu(a, slope), value, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(T::tanh);
        self.push(Op::Tanh(a), value, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| T::one() / (T::one() + (-v).exp()));
        self.push(Op::Sigmoid(a), value, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let value = self
            .value(a)
            .mapv(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(Op::Gelu(a), value, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(T::abs);
        self.push(Op::Abs(a), value, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.iter().fold(T::zero(), |acc, &v| acc + v);
            row.mapv_inplace(|v| v / sum);
        }
        self.push(Op::SoftmaxRows(a), value, &[a])
    }

    /// Row-wise layer normalization with `(1, n)` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (_, n) = self.shape(x);
        for p in [gamma, beta] {
            let (r, m) = self.shape(p);
            if r != 1 || m != n {
                return Err(Error::Shape { context: "layer_norm", axis: "cols", expected: n, got: m });
            }
        }
        let xv = self.value(x);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std[i] = is;
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            value,
            &[x, gamma, beta],
        ))
    }

    /// Per-channel normalization over the time axis. In training mode the
    /// statistics of `x` are used and an update for the running buffers is
    /// queued; otherwise the running buffers are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        eps: T,
    ) -> Result<Var> {
        let (rows, n) = self.shape(x);
        for p in [gamma, beta] {
            let (r, m) = self.shape(p);
            if r != 1 || m != n {
                return Err(Error::Shape { context: "batch_norm", axis: "cols", expected: n, got: m });
            }
        }
        let xv = self.value(x);
        let (mean, var) = if self.training {
            let rf = T::from_usize(rows).unwrap();
            let mean = xv.sum_axis(Axis(0)).mapv(|v| v / rf);
            let var = xv
                .rows()
                .into_iter()
                .fold(Array1::zeros(n), |acc: Array1<T>, row| {
                    acc + row.iter().zip(mean.iter()).map(|(&v, &m)| (v - m) * (v - m)).collect::<Array1<T>>()
                })
                .mapv(|v| v / rf);
            (mean, var)
        } else {
            (
                self.store.get(running_mean).row(0).to_owned(),
                self.store.get(running_var).row(0).to_owned(),
            )
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = (xv - &mean.view().insert_axis(Axis(0))) * &inv_std.view().insert_axis(Axis(0));
        let value = &xhat * self.value(gamma) + self.value(beta);
        let batch_stats = self.training;
        if batch_stats {
            self.stat_updates.push(NormStatUpdate {
                mean_id: running_mean,
                var_id: running_var,
                batch_mean: mean,
                batch_var: var,
            });
        }
        Ok(self.push(
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            value,
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let scale = T::lit(1.0 / keep);
        let dim = self.shape(a);
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let mask = Array2::from_shape_fn(dim, |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        self.mul_const(a, mask)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            let r = self.shape(p).0;
            if r != rows {
                return Err(Error::Shape { context: "concat_cols", axis: "rows", expected: rows, got: r });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            let c = self.shape(p).1;
            if c != cols {
                return Err(Error::Shape { context: "concat_rows", axis: "cols", expected: cols, got: c });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("col counts checked");
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let cols = self.shape(a).1;
        if start + len > cols {
            return Err(Error::Shape { context: "slice_cols", axis: "cols", expected: cols, got: start + len });
        }
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(Op::SliceCols(a, start), value, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.shape(a).0;
        if start + len > rows {
            return Err(Error::Shape { context: "slice_rows", axis: "rows", expected: rows, got: start + len });
        }
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(Op::SliceRows(a, start), value, &[a]))
    }

    /// Unfolds `(time, channels)` into `(time, kernel * channels)` windows
    /// with `pad_left` zeros before and `kernel - 1 - pad_left` after.
    pub fn im2col(&mut self, x: Var, kernel: usize, pad_left: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.dim();
        let mut value = Array2::zeros((t, kernel * c));
        for row in 0..t {
            for j in 0..kernel {
                let src = row as isize + j as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t {
                    value
                        .slice_mut(s![row, j * c..(j + 1) * c])
                        .assign(&xv.row(src as usize));
                }
            }
        }
        self.push(Op::Im2Col { x, kernel, pad_left }, value, &[x])
    }

    /// Average pooling along time, kernel 2 stride 2, trailing odd step dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (t, c) = av.dim();
        if t < 2 {
            return Err(Error::TooShort { context: "avg_pool2", min: 2, got: t });
        }
        let half = T::lit(0.5);
        let out_t = t / 2;
        let value = Array2::from_shape_fn((out_t, c), |(i, j)| (av[[2 * i, j]] + av[[2 * i + 1, j]]) * half);
        Ok(self.push(Op::AvgPool2(a), value, &[a]))
    }

    /// `mix · a` for a fixed `mix` matrix (broadcasting, pooling, resampling).
    pub fn row_mix(&mut self, a: Var, mix: Rc<Array2<T>>) -> Result<Var> {
        let rows = self.shape(a).0;
        if mix.ncols() != rows {
            return Err(Error::Shape { context: "row_mix", axis: "rows", expected: mix.ncols(), got: rows });
        }
        let value = mix.dot(self.value(a));
        Ok(self.push(Op::RowMix(a, mix), value, &[a]))
    }

    /// Repeats a `(1, n)` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Result<Var> {
        let index = Rc::new(vec![0usize; rows]);
        if self.shape(row).0 != 1 {
            return Err(Error::Shape { context: "broadcast_rows", axis: "rows", expected: 1, got: self.shape(row).0 });
        }
        self.gather_rows(row, index)
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let rows = av.nrows();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape { context: "gather_rows", axis: "rows", expected: rows, got: bad + 1 });
        }
        let mut value = Array2::zeros((index.len(), av.ncols()));
        for (dst, &src) in index.iter().enumerate() {
            value.row_mut(dst).assign(&av.row(src));
        }
        Ok(self.push(Op::GatherRows(a, index), value, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Op::Sum(a), Array2::from_elem((1, 1), total), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mean = av.sum() / T::from_usize(av.len()).unwrap();
        self.push(Op::Mean(a), Array2::from_elem((1, 1), mean), &[a])
    }

    /// Graph attention aggregation. Node `i` attends over `neighbors[i]`
    /// with logits `leaky_relu(src[i] + dst[j])`, softmax-normalized per
    /// node. Sums are accumulated in sorted order so results do not depend
    /// on node numbering. Returns the aggregated values and the attention
    /// coefficients per neighbor list.
    pub fn neighbor_attention(
        &mut self,
        values: Var,
        src: Var,
        dst: Var,
        neighbors: Rc<Vec<Vec<usize>>>,
        slope: T,
    ) -> Result<(Var, Vec<Vec<T>>)> {
        let (n, d) = self.shape(values);
        for v in [src, dst] {
            let (r, c) = self.shape(v);
            if r != n || c != 1 {
                return Err(Error::Shape { context: "neighbor_attention", axis: "rows", expected: n, got: r });
            }
        }
        if neighbors.len() != n {
            return Err(Error::Shape { context: "neighbor_attention", axis: "nodes", expected: n, got: neighbors.len() });
        }
        let vv = self.value(values);
        let sv = self.value(src);
        let dv = self.value(dst);
        let mut alpha = Vec::with_capacity(n);
        let mut out = Array2::zeros((n, d));
        let mut terms = Vec::new();
        for (i, nbrs) in neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                return Err(Error::invalid("neighbor_attention", format!("node {i} has no neighbors")));
            }
            let logits: Vec<T> = nbrs
                .iter()
                .map(|&j| {
                    let z = sv[[i, 0]] + dv[[j, 0]];
                    if z > T::zero() { z } else { z * slope }
                })
                .collect();
            let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
            terms.clear();
            terms.extend_from_slice(&exps);
            let denom = sorted_sum(&mut terms);
            let a: Vec<T> = exps.iter().map(|&e| e / denom).collect();
            for c in 0..d {
                terms.clear();
                terms.extend(nbrs.iter().zip(&a).map(|(&j, &w)| w * vv[[j, c]]));
                out[[i, c]] = sorted_sum(&mut terms);
            }
            alpha.push(a);
        }
        let coeffs = alpha.clone();
        let var = self.push(
            Op::NeighborAttention { values, src, dst, neighbors, alpha, slope },
            out,
            &[values, src, dst],
        );
        Ok((var, coeffs))
    }

    /// Reverse pass from a `(1, 1)` loss.
    pub fn backward(&self, loss: Var) -> Result<Backward<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::invalid("backward", "loss must be a (1, 1) scalar"));
        }
        let loss_value = self.value(loss)[[0, 0]];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss_value}")));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut params = Gradients::empty(self.store.len());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, i, &dy, &mut grads, &mut params);
            // keep leaf gradients for `Backward::wrt`
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        Ok(Backward { nodes: grads, params })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        index: usize,
        dy: &Array2<T>,
        grads: &mut [Option<Array2<T>>],
        params: &mut Gradients<T>,
    ) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Array2<T>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let y = || node.value.as_ref().expect("op node value");
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, dy),
            Op::MatMul(a, b) => {
                if nodes[a.0].needs_grad {
                    acc(*a, dy.dot(&self.value(*b).t()));
                }
                if nodes[b.0].needs_grad {
                    acc(*b, self.value(*a).t().dot(dy));
                }
            }
            Op::MatMulNt(a, b) => {
                if nodes[a.0].needs_grad {
                    acc(*a, dy.dot(self.value(*b)));
                }
                if nodes[b.0].needs_grad {
                    acc(*b, dy.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, dy * self.value(*b));
                acc(*b, dy * self.value(*a));
            }
            Op::AddRow(a, row) => {
                acc(*a, dy.clone());
                acc(*row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                acc(*a, dy * self.value(*row));
                if nodes[row.0].needs_grad {
                    acc(*row, (dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => acc(*a, dy.mapv(|v| v * *f)),
            Op::MulConst(a, m) => acc(*a, dy * m),
            Op::Relu(a) => {
                let mut d = dy.clone();
                d.zip_mut_with(self.value(*a), |g, &x| {
                    if x <= T::zero() {
                        *g = T::zero()
                    }
                });
                acc(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = dy.clone();
                d.zip_mut_with(self.value(*a), |g, &x| {
                    if x <= T::zero() {
                        *g = *g * *slope
                    }
                });
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = dy.clone();
                d.zip_mut_with(y(), |g, &t| *g = *g * (T::one() - t * t));
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = dy.clone();
                d.zip_mut_with(y(), |g, &s| *g = *g * s * (T::one() - s));
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let mut d = dy.clone();
                d.zip_mut_with(self.value(*a), |g, &x| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (T::one() + three * k * x * x);
                    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                    *g = *g * deriv;
                });
                acc(*a, d);
            }
            Op::Abs(a) => {
                let mut d = dy.clone();
                d.zip_mut_with(self.value(*a), |g, &x| {
                    *g = if x > T::zero() {
                        *g
                    } else if x < T::zero() {
                        -*g
                    } else {
                        T::zero()
                    }
                });
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let yv = y();
                let mut d = Array2::zeros(yv.dim());
                for ((mut drow, yrow), dyrow) in d.rows_mut().into_iter().zip(yv.rows()).zip(dy.rows()) {
                    let dot = yrow.iter().zip(dyrow.iter()).fold(T::zero(), |s, (&p, &g)| s + p * g);
                    for ((o, &p), &g) in drow.iter_mut().zip(yrow.iter()).zip(dyrow.iter()) {
                        *o = p * (g - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                if nodes[gamma.0].needs_grad {
                    acc(*gamma, (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if nodes[beta.0].needs_grad {
                    acc(*beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if nodes[x.0].needs_grad {
                    let n = T::from_usize(xhat.ncols()).unwrap();
                    let dxhat = dy * gv;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let sum_d = dr.sum();
                        let sum_dx = dr.iter().zip(xr.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        let is = inv_std[i];
                        for ((o, &d), &xh) in row.iter_mut().zip(dr.iter()).zip(xr.iter()) {
                            *o = is / n * (n * d - sum_d - xh * sum_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let gv = self.value(*gamma);
                if nodes[gamma.0].needs_grad {
                    acc(*gamma, (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if nodes[beta.0].needs_grad {
                    acc(*beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if nodes[x.0].needs_grad {
                    let dxhat = dy * gv;
                    let inv = inv_std.view().insert_axis(Axis(0));
                    if *batch_stats {
                        let m = T::from_usize(xhat.nrows()).unwrap();
                        let sum_d = dxhat.sum_axis(Axis(0)).insert_axis(Axis(0));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        let dx = (dxhat.mapv(|v| v * m) - &sum_d - xhat * &sum_dx) * &inv / m;
                        acc(*x, dx);
                    } else {
                        acc(*x, dxhat * &inv);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    acc(*p, dy.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    acc(*p, dy.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                acc(*a, d);
            }
            Op::Im2Col { x, kernel, pad_left } => {
                let (t, c) = self.shape(*x);
                let mut d = Array2::zeros((t, c));
                for row in 0..t {
                    for j in 0..*kernel {
                        let src = row as isize + j as isize - *pad_left as isize;
                        if src >= 0 && (src as usize) < t {
                            let mut target = d.row_mut(src as usize);
                            target += &dy.slice(s![row, j * c..(j + 1) * c]);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::AvgPool2(a) => {
                let half = T::lit(0.5);
                let mut d = Array2::zeros(self.shape(*a));
                for (i, row) in dy.rows().into_iter().enumerate() {
                    let scaled = row.mapv(|v| v * half);
                    d.row_mut(2 * i).assign(&scaled);
                    d.row_mut(2 * i + 1).assign(&scaled);
                }
                acc(*a, d);
            }
            Op::RowMix(a, mix) => acc(*a, mix.t().dot(dy)),
            Op::GatherRows(a, index) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (src, &dst) in index.iter().enumerate() {
                    let mut target = d.row_mut(dst);
                    target += &dy.row(src);
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let g = dy[[0, 0]];
                acc(*a, Array2::from_elem(self.shape(*a), g));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let g = dy[[0, 0]] / T::from_usize(shape.0 * shape.1).unwrap();
                acc(*a, Array2::from_elem(shape, g));
            }
            Op::NeighborAttention { values, src, dst, neighbors, alpha, slope } => {
                let vv = self.value(*values);
                let sv = self.value(*src);
                let dv = self.value(*dst);
                let (n, _) = vv.dim();
                let mut dvals = Array2::zeros(vv.dim());
                let mut dsrc = Array2::zeros((n, 1));
                let mut ddst = Array2::zeros((n, 1));
                for (i, nbrs) in neighbors.iter().enumerate() {
                    let gi = dy.row(i);
                    let a = &alpha[i];
                    let dalpha: Vec<T> = nbrs
                        .iter()
                        .map(|&j| gi.iter().zip(vv.row(j).iter()).fold(T::zero(), |s, (&g, &v)| s + g * v))
                        .collect();
                    let weighted = a.iter().zip(&dalpha).fold(T::zero(), |s, (&w, &da)| s + w * da);
                    for (k, &j) in nbrs.iter().enumerate() {
                        let mut target = dvals.row_mut(j);
                        target.scaled_add(a[k], &gi);
                        let de = a[k] * (dalpha[k] - weighted);
                        let z = sv[[i, 0]] + dv[[j, 0]];
                        let dz = if z > T::zero() { de } else { de * *slope };
                        dsrc[[i, 0]] += dz;
                        ddst[[j, 0]] += dz;
                    }
                }
                acc(*values, dvals);
                acc(*src, dsrc);
                acc(*dst, ddst);
            }
        }
        let _ = index;
    }
}

/// Result of a reverse pass.
pub struct Backward<T> {
    nodes: Vec<Option<Array2<T>>>,
    params: Gradients<T>,
}

impl<T: Scalar> Backward<T> {
    pub fn params(&self) -> &Gradients<T> {
        &self.params
    }

    pub fn into_params(self) -> Gradients<T> {
        self.params
    }

    /// Gradient with respect to a tracked input created by [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}
