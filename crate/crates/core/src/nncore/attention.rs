use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use super::layers::Linear;
use super::sequence::FeatureSequence;

/// Scaled dot-product attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Tape handles for an attention call.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub values: Var,
    /// One `(query_steps, key_steps)` softmax matrix per head.
    pub weights: Vec<Var>,
}

/// Materialized attention result.
#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    pub values: FeatureSequence<T>,
    /// `(heads, query_steps, key_steps)`
    pub weights: Array3<T>,
}

impl AttentionVars {
    pub fn materialize<T: Scalar>(&self, g: &Graph<'_, T>) -> Result<AttentionOutput<T>> {
        let (q, k) = g.shape(self.weights[0]);
        let mut weights = Array3::zeros((self.weights.len(), q, k));
        for (h, &w) in self.weights.iter().enumerate() {
            weights.index_axis_mut(ndarray::Axis(0), h).assign(g.value(w));
        }
        Ok(AttentionOutput {
            values: FeatureSequence::new(g.value(self.values).clone())?,
            weights,
        })
    }
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape { context: "multi-head attention", axis: "heads", expected: dim, got: heads });
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        })
    }

    /// Sets every projection to identity with zero bias.
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for lin in [&self.query, &self.key, &self.value, &self.output] {
            store.set(lin.weight, Array2::eye(self.dim))?;
            store.set(lin.bias, Array2::zeros((1, self.dim)))?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, query: Var, key: Var, value: Var) -> Result<AttentionVars> {
        let (_, qd) = g.shape(query);
        let (ks, kd) = g.shape(key);
        let (vs, vd) = g.shape(value);
        if ks != vs {
            return Err(Error::Shape { context: "attention key/value", axis: "key_steps", expected: ks, got: vs });
        }
        for d in [qd, kd, vd] {
            if d != self.dim {
                return Err(Error::Shape { context: "attention input", axis: "hidden_dim", expected: self.dim, got: d });
            }
        }
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, key)?;
        let v = self.value.forward(g, value)?;
        let head_dim = self.dim / self.heads;
        let scale = T::lit(1.0 / (head_dim as f64).sqrt());
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim)?,
                    g.slice_cols(k, h * head_dim, head_dim)?,
                    g.slice_cols(v, h * head_dim, head_dim)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores);
            outputs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let merged = if outputs.len() == 1 { outputs[0] } else { g.concat_cols(&outputs)? };
        let values = self.output.forward(g, merged)?;
        Ok(AttentionVars { values, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn identity_attention(dim: usize, heads: usize) -> (ParamStore<f64>, MultiHeadAttention) {
        let mut store = ParamStore::new(3);
        let mha = MultiHeadAttention::new(&mut store, "a", dim, heads).unwrap();
        mha.set_identity(&mut store).unwrap();
        (store, mha)
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut store = ParamStore::<f64>::new(5);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2).unwrap();
        let mut g = Graph::new(&store);
        let q = g.constant(array![[0.3, -1.0, 2.0, 0.5]]);
        let kv = g.constant(array![[1.0, 0.0, -0.5, 0.25]]);
        let out = mha.forward(&mut g, q, kv, kv).unwrap().materialize(&g).unwrap();
        assert!(out.weights.iter().all(|&w| w == 1.0));
        // output is the value row passed through the value and output projections
        let v = array![[1.0, 0.0, -0.5, 0.25]].dot(store.get(mha.value.weight)) + store.get(mha.value.bias);
        let expect = v.dot(store.get(mha.output.weight)) + store.get(mha.output.bias);
        for (a, b) in out.values.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut store = ParamStore::<f64>::new(9);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2).unwrap();
        let mut g = Graph::new(&store);
        let q = g.constant(array![[0.3, -1.0, 2.0, 0.5], [1.0, 1.0, 1.0, 1.0], [-3.0, 0.0, 0.1, 0.2]]);
        let kv = g.constant(array![[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]]);
        let out = mha.forward(&mut g, q, kv, kv).unwrap().materialize(&g).unwrap();
        assert_eq!(out.weights.dim(), (2, 3, 2));
        assert!(out.weights.iter().all(|&w| (w - 0.5).abs() < 1e-15));
    }

    #[test]
    fn identity_projection_weights_match_hand_softmax() {
        // one head over d = 4: weights = softmax(Q Kᵀ / 2)
        let (store, mha) = identity_attention(4, 1);
        let qm = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0]];
        let km = array![[2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]];
        let mut g = Graph::new(&store);
        let q = g.constant(qm);
        let k = g.constant(km.clone());
        let out = mha.forward(&mut g, q, k, k).unwrap().materialize(&g).unwrap();
        // row 0: logits (2/2, 0/2) = (1, 0); row 1: (0/2, 1/2) = (0, 0.5)
        let e = std::f64::consts::E;
        let r0 = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let r1 = [1.0 / (1.0 + e.sqrt()), e.sqrt() / (1.0 + e.sqrt())];
        for (j, w) in r0.iter().enumerate() {
            assert!((out.weights[[0, 0, j]] - w).abs() < 1e-12);
        }
        for (j, w) in r1.iter().enumerate() {
            assert!((out.weights[[0, 1, j]] - w).abs() < 1e-12);
        }
        // with identity projections the output is weights · V
        let expect0 = km.row(0).mapv(|v| v * r0[0]) + km.row(1).mapv(|v| v * r0[1]);
        for (a, b) in out.values.data().row(0).iter().zip(expect0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_key_value_lengths_are_rejected() {
        let (store, mha) = identity_attention(4, 2);
        let mut g = Graph::new(&store);
        let q = g.constant(Array2::zeros((2, 4)));
        let k = g.constant(Array2::zeros((3, 4)));
        let v = g.constant(Array2::zeros((4, 4)));
        match mha.forward(&mut g, q, k, v) {
            Err(Error::Shape { axis, .. }) => assert_eq!(axis, "key_steps"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::<f32>::new(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4).is_err());
    }
}
