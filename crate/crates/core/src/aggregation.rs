//! Interaction-based multiscale aggregation.
//!
//! Each modality's global vector and local sequence are merged into a
//! sequence aligned with the current text: concatenate the global vector to
//! every step of the current text feature, convolve back to the hidden width,
//! self-attend, cross-attend into the local sequence, run an FFT block, then
//! concatenate the global vector again and project.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{GlobalLocalVars, Modality};
use crate::nncore::{AttentionVars, Conv1d, FeatureSequence, FftBlock, FftConfig, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Previous,
    Following,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Previous => "previous",
            Side::Following => "following",
        }
    }
}

/// Current-sentence text encoding, `(L_cur, hidden)`.
#[derive(Clone, Debug)]
pub struct CurrentTextFeature<T> {
    pub seq: FeatureSequence<T>,
}

/// Aggregated global-local feature for one modality and side.
#[derive(Clone, Debug)]
pub struct AggregatedFeature<T> {
    pub modality: Modality,
    pub side: Side,
    pub seq: FeatureSequence<T>,
}

/// Which parts of the aggregation pipeline are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AggregationOptions {
    pub use_global: bool,
    pub use_local: bool,
    /// When false the current text is replaced by a learned constant query.
    pub interaction: bool,
}

impl Default for AggregationOptions {
    fn default() -> Self {
        AggregationOptions { use_global: true, use_local: true, interaction: true }
    }
}

#[derive(Clone, Debug)]
pub struct AggregationVars {
    pub seq: Var,
    pub self_attention: Option<AttentionVars>,
    pub cross_attention: Option<AttentionVars>,
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub fuse_in: Conv1d,
    pub self_attention: MultiHeadAttention,
    pub cross_attention: MultiHeadAttention,
    pub block: FftBlock,
    pub fuse_out: Linear,
    /// Learned query row used when interaction with the current text is removed.
    pub constant_query: ParamId,
    /// Plain merge used when the whole aggregation stage is ablated.
    pub bypass: Linear,
    pub hidden: usize,
}

impl Aggregator {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fft: &FftConfig, heads: usize, kernel: usize) -> Result<Self> {
        let h = fft.hidden;
        Ok(Aggregator {
            fuse_in: Conv1d::new(store, &format!("{name}.fuse_in"), 2 * h, h, kernel),
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self_attn"), h, heads)?,
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), h, heads)?,
            block: FftBlock::new(store, &format!("{name}.fft"), fft)?,
            fuse_out: Linear::new(store, &format!("{name}.fuse_out"), 2 * h, h),
            constant_query: store.normal(format!("{name}.constant_query"), 1, h, 0.1),
            bypass: Linear::new(store, &format!("{name}.bypass"), 2 * h, h),
            hidden: h,
        })
    }

    fn check(&self, g: &Graph<'_, impl Scalar>, t_cur: Var, glf: &GlobalLocalVars) -> Result<usize> {
        let (l_cur, d) = g.shape(t_cur);
        if d != self.hidden {
            return Err(Error::Shape { context: "aggregation current text", axis: "hidden_dim", expected: self.hidden, got: d });
        }
        let (gr, gd) = g.shape(glf.global);
        if gr != 1 {
            return Err(Error::Shape { context: "aggregation global feature", axis: "rows", expected: 1, got: gr });
        }
        if gd != self.hidden {
            return Err(Error::Shape { context: "aggregation global feature", axis: "hidden_dim", expected: self.hidden, got: gd });
        }
        let ld = g.shape(glf.local).1;
        if ld != self.hidden {
            return Err(Error::Shape { context: "aggregation local feature", axis: "hidden_dim", expected: self.hidden, got: ld });
        }
        Ok(l_cur)
    }

    fn broadcast_global<T: Scalar>(&self, g: &mut Graph<'_, T>, glf: &GlobalLocalVars, steps: usize, use_global: bool) -> Result<Var> {
        if use_global {
            g.broadcast_rows(glf.global, steps)
        } else {
            Ok(g.constant(Array2::zeros((steps, self.hidden))))
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        t_cur: Var,
        glf: &GlobalLocalVars,
        opts: AggregationOptions,
    ) -> Result<AggregationVars> {
        let steps = self.check(g, t_cur, glf)?;
        let query = if opts.interaction {
            t_cur
        } else {
            let q = g.param(self.constant_query);
            g.broadcast_rows(q, steps)?
        };
        let global = self.broadcast_global(g, glf, steps, opts.use_global)?;

        let x = g.concat_cols(&[query, global])?;
        let x = self.fuse_in.forward(g, x)?;
        let sa = self.self_attention.forward(g, x, x, x)?;
        let (mixed, cross) = if opts.use_local {
            let ca = self.cross_attention.forward(g, sa.values, glf.local, glf.local)?;
            (ca.values, Some(ca))
        } else {
            (sa.values, None)
        };
        let h = self.block.forward(g, mixed)?;
        let h = g.concat_cols(&[h, global])?;
        let seq = self.fuse_out.forward(g, h)?;
        Ok(AggregationVars { seq, self_attention: Some(sa), cross_attention: cross })
    }

    /// Aggregation stage removed: the global vector and the local sequence,
    /// nearest-resampled to the current text length, are concatenated and
    /// projected without attention or current-text interaction.
    pub fn forward_bypass<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        steps: usize,
        glf: &GlobalLocalVars,
        opts: AggregationOptions,
    ) -> Result<AggregationVars> {
        let global = self.broadcast_global(g, glf, steps, opts.use_global)?;
        let local = if opts.use_local {
            let n = g.shape(glf.local).0;
            let index: Vec<usize> = (0..steps).map(|i| i * n / steps).collect();
            g.gather_rows(glf.local, Rc::new(index))?
        } else {
            g.constant(Array2::zeros((steps, self.hidden)))
        };
        let x = g.concat_cols(&[global, local])?;
        let seq = self.bypass.forward(g, x)?;
        Ok(AggregationVars { seq, self_attention: None, cross_attention: None })
    }
}

/// Three independently parameterized aggregators, one per modality.
#[derive(Clone, Debug)]
pub struct Aggregators {
    pub video: Aggregator,
    pub text: Aggregator,
    pub audio: Aggregator,
}

impl Aggregators {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fft: &FftConfig, heads: usize, kernel: usize) -> Result<Self> {
        Ok(Aggregators {
            video: Aggregator::new(store, &format!("{name}.video"), fft, heads, kernel)?,
            text: Aggregator::new(store, &format!("{name}.text"), fft, heads, kernel)?,
            audio: Aggregator::new(store, &format!("{name}.audio"), fft, heads, kernel)?,
        })
    }

    pub fn get(&self, modality: Modality) -> &Aggregator {
        match modality {
            Modality::Video => &self.video,
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
        }
    }

    pub fn aggregate_all<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        t_cur: Var,
        video: &GlobalLocalVars,
        text: &GlobalLocalVars,
        audio: &GlobalLocalVars,
        opts: AggregationOptions,
    ) -> Result<[AggregationVars; 3]> {
        Ok([
            self.video.forward(g, t_cur, video, opts)?,
            self.text.forward(g, t_cur, text, opts)?,
            self.audio.forward(g, t_cur, audio, opts)?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{gradient_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fft(h: usize) -> FftConfig {
        FftConfig { hidden: h, heads: 2, ffn_inner: 2 * h, ffn_kernel: 3, dropout: 0.0 }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn inputs(g: &mut Graph<'_, f64>, l_cur: usize, l_loc: usize, h: usize, seed: u64) -> (Var, GlobalLocalVars) {
        let t = g.constant(random(l_cur, h, seed));
        let global = g.constant(random(1, h, seed + 1));
        let local = g.constant(random(l_loc, h, seed + 2));
        (t, GlobalLocalVars { modality: Modality::Video, global, local })
    }

    #[test]
    fn output_follows_current_text_length() {
        let mut store = ParamStore::<f64>::new(1);
        let agg = Aggregator::new(&mut store, "agg", &fft(256), 2, 3).unwrap();
        let mut g = Graph::new(&store);
        let (t, glf) = inputs(&mut g, 5, 9, 256, 3);
        let out = agg.forward(&mut g, t, &glf, AggregationOptions::default()).unwrap();
        assert_eq!(g.shape(out.seq), (5, 256));
    }

    #[test]
    fn single_local_step_gets_full_cross_attention() {
        let mut store = ParamStore::<f64>::new(2);
        let agg = Aggregator::new(&mut store, "agg", &fft(8), 2, 3).unwrap();
        let mut g = Graph::new(&store);
        let (t, glf) = inputs(&mut g, 4, 1, 8, 5);
        let out = agg.forward(&mut g, t, &glf, AggregationOptions::default()).unwrap();
        let cross = out.cross_attention.unwrap().materialize(&g).unwrap();
        assert_eq!(cross.weights.dim(), (2, 4, 1));
        assert!(cross.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn cross_attention_is_invariant_to_local_order() {
        // attention treats keys as a set: permuting the local steps (keys and
        // values together) only changes summation order
        let mut store = ParamStore::<f64>::new(3);
        let agg = Aggregator::new(&mut store, "agg", &fft(8), 2, 3).unwrap();
        let local = random(3, 8, 40);
        let mut permuted = local.clone();
        for (dst, src) in [2usize, 0, 1].iter().enumerate() {
            permuted.row_mut(dst).assign(&local.row(*src));
        }
        let run = |loc: &Array2<f64>| {
            let mut g = Graph::new(&store);
            let t = g.constant(random(3, 8, 41));
            let global = g.constant(random(1, 8, 42));
            let local = g.constant(loc.clone());
            let glf = GlobalLocalVars { modality: Modality::Audio, global, local };
            let out = agg.forward(&mut g, t, &glf, AggregationOptions::default()).unwrap();
            let w = out.cross_attention.unwrap().materialize(&g).unwrap().weights;
            (g.value(out.seq).clone(), w)
        };
        let (a, w) = run(&local);
        let (b, _) = run(&permuted);
        assert!(!w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-9), "attention should not be uniform");
        let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12, "max difference {diff}");

        // changing the local content (not just its order) does change the output
        let (c, _) = run(&local.mapv(|v| v * 2.0));
        assert!((&a - &c).mapv(f64::abs).sum() > 1e-6);
    }

    #[test]
    fn aggregators_are_independent() {
        let mut store = ParamStore::<f64>::new(4);
        let aggs = Aggregators::new(&mut store, "agg", &fft(8), 2, 3).unwrap();
        let text_ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with("agg.text.")).map(|(id, _)| id).collect();

        let mut g = Graph::new(&store);
        let (t, v) = inputs(&mut g, 4, 3, 8, 50);
        let (_, tx) = inputs(&mut g, 4, 5, 8, 60);
        let (_, au) = inputs(&mut g, 4, 2, 8, 70);
        let outs = aggs.aggregate_all(&mut g, t, &v, &tx, &au, AggregationOptions::default()).unwrap();
        for o in &outs {
            assert_eq!(g.shape(o.seq), (4, 8));
        }
        let loss = g.sum(outs[0].seq);
        let back = g.backward(loss).unwrap();
        for id in text_ids {
            assert!(back.params().get(id).is_none(), "text aggregator received gradient");
        }

        // zeroing the video inputs changes only the video output
        let zero_v = GlobalLocalVars {
            modality: Modality::Video,
            global: g.constant(Array2::zeros((1, 8))),
            local: g.constant(Array2::zeros((3, 8))),
        };
        let outs2 = aggs.aggregate_all(&mut g, t, &zero_v, &tx, &au, AggregationOptions::default()).unwrap();
        assert_ne!(g.value(outs[0].seq), g.value(outs2[0].seq));
        assert_eq!(g.value(outs[1].seq), g.value(outs2[1].seq));
        assert_eq!(g.value(outs[2].seq), g.value(outs2[2].seq));
    }

    #[test]
    fn gradient_check_passes() {
        let mut store = ParamStore::<f64>::new(5);
        let agg = Aggregator::new(&mut store, "agg", &fft(8), 2, 3).unwrap();
        let t = random(3, 8, 80);
        let gl = random(1, 8, 81);
        let lo = random(4, 8, 82);
        let w = random(3, 8, 83);
        let report = gradient_check(
            &mut store,
            |g| {
                let t = g.constant(t.clone());
                let global = g.constant(gl.clone());
                let local = g.constant(lo.clone());
                let glf = GlobalLocalVars { modality: Modality::Text, global, local };
                let out = agg.forward(g, t, &glf, AggregationOptions::default())?;
                let y = g.mul_const(out.seq, w.clone())?;
                Ok(g.sum(y))
            },
            // several entries have gradients near 1e-8; the wider step keeps
            // rounding noise in the difference quotient below them
            &GradCheckOptions { epsilon: 1e-5, ..Default::default() },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{:?} max {}", report.flagged(1e-4), report.max_rel());
    }

    #[test]
    fn gradient_reaches_global_and_local_inputs() {
        let mut store = ParamStore::<f64>::new(6);
        let agg = Aggregator::new(&mut store, "agg", &fft(8), 2, 3).unwrap();
        let mut g = Graph::new(&store);
        let t = g.constant(random(3, 8, 90));
        let global = g.variable(random(1, 8, 91));
        let local = g.variable(random(3, 8, 92));
        let glf = GlobalLocalVars { modality: Modality::Video, global, local };
        let out = agg.forward(&mut g, t, &glf, AggregationOptions::default()).unwrap();
        let w = g.constant(random(3, 8, 93));
        let y = g.mul(out.seq, w).unwrap();
        let loss = g.sum(y);
        let back = g.backward(loss).unwrap();
        assert!(back.wrt(global).unwrap().iter().any(|v| v.abs() > 1e-8));
        assert!(back.wrt(local).unwrap().iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn constant_query_removes_current_text_dependence() {
        let mut store = ParamStore::<f64>::new(7);
        let agg = Aggregator::new(&mut store, "agg", &fft(8), 2, 3).unwrap();
        let opts = AggregationOptions { interaction: false, ..Default::default() };
        let mut g = Graph::new(&store);
        let (t1, glf) = inputs(&mut g, 4, 3, 8, 100);
        let t2 = g.constant(random(4, 8, 200));
        let a = agg.forward(&mut g, t1, &glf, opts).unwrap();
        let b = agg.forward(&mut g, t2, &glf, opts).unwrap();
        assert_eq!(g.value(a.seq), g.value(b.seq));
        let full = agg.forward(&mut g, t1, &glf, AggregationOptions::default()).unwrap();
        assert_ne!(g.value(a.seq), g.value(full.seq));
    }
}
