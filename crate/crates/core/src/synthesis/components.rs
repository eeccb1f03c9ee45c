use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::TextEncoder;
use crate::nncore::{
    sinusoid_positions, AttentionVars, ConvDownsampleStack, Conv1d, FeatureSequence, FftBlock, FftConfig, LayerNorm,
    Linear, MultiHeadAttention,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use super::sample::DubbingSample;

/// `(phonemes, steps)` matrix averaging the encoder steps covered by each
/// phoneme's frame span. Frame `t` maps to step `t / frames_per_step`,
/// clamped to the last step.
pub fn span_pooling<T: Scalar>(durations: &[usize], frames_per_step: usize, steps: usize) -> Array2<T> {
    let mut pool = Array2::zeros((durations.len(), steps));
    let mut t = 0;
    for (i, &d) in durations.iter().enumerate() {
        let w = T::lit(1.0 / d as f64);
        for _ in 0..d {
            let j = (t / frames_per_step).min(steps - 1);
            pool[[i, j]] += w;
            t += 1;
        }
    }
    pool
}

/// Downsampling conv stack plus linear, pooled per phoneme span. Used for
/// the current lip and face streams (40 ms per input step).
#[derive(Clone, Debug)]
pub struct SpanEncoder {
    pub stack: ConvDownsampleStack,
    pub output: Linear,
}

impl SpanEncoder {
    /// Mel frames (10 ms) per 40 ms input step.
    pub const FRAMES_PER_INPUT_STEP: usize = 4;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, raw_dim: usize, hidden: usize, layers: usize, dropout: f64) -> Self {
        SpanEncoder {
            stack: ConvDownsampleStack::new(store, &format!("{name}.downsample"), raw_dim, hidden, layers, dropout),
            output: Linear::new(store, &format!("{name}.output"), hidden, hidden),
        }
    }

    pub fn min_steps(&self) -> usize {
        self.stack.min_steps()
    }

    /// `(phonemes, hidden)` encoding, or `None` when the stream is absent or
    /// shorter than the stack's minimum.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        frames: Option<&FeatureSequence<T>>,
        durations: &[usize],
    ) -> Result<Option<Var>> {
        let Some(frames) = frames else { return Ok(None) };
        if frames.steps() < self.min_steps() {
            return Ok(None);
        }
        let x = g.constant(frames.data().clone());
        let h = self.stack.forward(g, x)?;
        let h = self.output.forward(g, h)?;
        let steps = g.shape(h).0;
        let per_step = Self::FRAMES_PER_INPUT_STEP * self.stack.min_steps();
        let pool = span_pooling(durations, per_step, steps);
        Ok(Some(g.row_mix(h, Rc::new(pool))?))
    }
}

/// Current-sentence encodings.
#[derive(Clone, Copy, Debug)]
pub struct CurrentVars {
    /// Text path alone; the current text feature.
    pub t_cur: Var,
    /// Text path plus pooled lip path.
    pub h: Var,
    /// Set when lip features were absent or too short to encode.
    pub lip_skipped: bool,
}

/// Text encoder and lip encoder of the current sentence.
#[derive(Clone, Debug)]
pub struct CurrentEncoder {
    pub text: TextEncoder,
    pub lip: SpanEncoder,
}

impl CurrentEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        text_layers: usize,
        lip_dim: usize,
        lip_layers: usize,
        fft: &FftConfig,
    ) -> Result<Self> {
        Ok(CurrentEncoder {
            text: TextEncoder::new(store, &format!("{name}.text"), vocab, text_layers, fft)?,
            lip: SpanEncoder::new(store, &format!("{name}.lip"), lip_dim, fft.hidden, lip_layers, fft.dropout),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        phonemes: &[usize],
        lip: Option<&FeatureSequence<T>>,
        durations: &[usize],
    ) -> Result<CurrentVars> {
        if phonemes.is_empty() {
            return Err(Error::TooShort { context: "current phonemes", min: 1, got: 0 });
        }
        if durations.len() != phonemes.len() {
            return Err(Error::Shape { context: "current durations", axis: "phonemes", expected: phonemes.len(), got: durations.len() });
        }
        let t_cur = self.text.forward(g, phonemes)?;
        match self.lip.forward(g, lip, durations)? {
            Some(lip) => {
                let h = g.add(t_cur, lip)?;
                Ok(CurrentVars { t_cur, h, lip_skipped: false })
            }
            None => {
                if lip.is_some() {
                    log::warn!("lip sequence shorter than {} steps; lip path skipped", self.lip.min_steps());
                }
                Ok(CurrentVars { t_cur, h: t_cur, lip_skipped: true })
            }
        }
    }
}

/// Per-step sigmoid gate blending the previous and following contexts.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub gate: Linear,
}

impl GatedFusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, hidden: usize) -> Self {
        GatedFusion { gate: Linear::new(store, &format!("{name}.gate"), 2 * hidden, hidden) }
    }

    /// `g ⊙ pre + (1 − g) ⊙ fol` with `g = σ(W [pre; fol] + b)`. A single
    /// present side passes through; `None` means no context at all.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pre: Option<Var>, fol: Option<Var>) -> Result<Option<Var>> {
        match (pre, fol) {
            (None, None) => Ok(None),
            (Some(x), None) | (None, Some(x)) => Ok(Some(x)),
            (Some(pre), Some(fol)) => {
                let (a, b) = (g.shape(pre), g.shape(fol));
                if a != b {
                    return Err(Error::Shape { context: "gated fusion", axis: "steps", expected: a.0, got: b.0 });
                }
                let x = g.concat_cols(&[pre, fol])?;
                let z = self.gate.forward(g, x)?;
                let gate = g.sigmoid(z);
                let diff = g.sub(pre, fol)?;
                let gated = g.mul(gate, diff)?;
                Ok(Some(g.add(fol, gated)?))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptorVars {
    pub seq: Var,
    pub fused: Option<Var>,
    pub attention: Option<AttentionVars>,
}

/// Gated fusion of both contexts used as keys and values of a cross-attention
/// queried by the current hidden sequence, merged back with a residual.
#[derive(Clone, Debug)]
pub struct ContextAwareAdaptor {
    pub fusion: GatedFusion,
    pub attention: MultiHeadAttention,
}

impl ContextAwareAdaptor {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, hidden: usize, heads: usize) -> Result<Self> {
        Ok(ContextAwareAdaptor {
            fusion: GatedFusion::new(store, &format!("{name}.fusion"), hidden),
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), hidden, heads)?,
        })
    }

    /// Cross-attention from `h` into `fused` plus residual; `h` unchanged
    /// when there is no context.
    pub fn adapt<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, fused: Option<Var>) -> Result<AdaptorVars> {
        let Some(fused) = fused else {
            return Ok(AdaptorVars { seq: h, fused: None, attention: None });
        };
        let attn = self.attention.forward(g, h, fused, fused)?;
        let seq = g.add(h, attn.values)?;
        Ok(AdaptorVars { seq, fused: Some(fused), attention: Some(attn) })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, pre: Option<Var>, fol: Option<Var>) -> Result<AdaptorVars> {
        let fused = self.fusion.forward(g, pre, fol)?;
        self.adapt(g, h, fused)
    }
}

/// Range and moments of a per-phoneme prosody target over the training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl VarianceStats {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Err(Error::invalid("variance statistics", "no values"));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(VarianceStats { min, max, mean, std: var.sqrt().max(1e-6) })
    }

    /// Bin of `value` among `bins` equal-width bins over `[min, max]`;
    /// values outside the range fall into the edge bins.
    pub fn bucket(&self, value: f64, bins: usize) -> usize {
        let width = (self.max - self.min).max(f64::MIN_POSITIVE);
        let pos = ((value - self.min) / width * bins as f64).floor();
        if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(bins - 1)
        }
    }
}

/// Two conv–ReLU–layer-norm–dropout layers and a scalar projection.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    pub layers: Vec<(Conv1d, LayerNorm)>,
    pub output: Linear,
    pub dropout: f64,
}

impl VariancePredictor {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, hidden: usize, kernel: usize, dropout: f64) -> Self {
        let layers = (0..2)
            .map(|i| {
                (
                    Conv1d::new(store, &format!("{name}.{i}.conv"), hidden, hidden, kernel),
                    LayerNorm::new(store, &format!("{name}.{i}.norm"), hidden),
                )
            })
            .collect();
        VariancePredictor { layers, output: Linear::new(store, &format!("{name}.output"), hidden, 1), dropout }
    }

    /// `(steps, 1)` standardized prediction.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, norm) in &self.layers {
            h = conv.forward(g, h)?;
            h = g.relu(h);
            h = norm.forward(g, h)?;
            h = g.dropout(h, self.dropout)?;
        }
        self.output.forward(g, h)
    }
}

/// Repeats step `i` of `h` `durations[i]` times.
pub fn length_regulate<T: Scalar>(g: &mut Graph<'_, T>, h: Var, durations: &[usize]) -> Result<Var> {
    let steps = g.shape(h).0;
    if durations.len() != steps {
        return Err(Error::Shape { context: "length regulator", axis: "phonemes", expected: steps, got: durations.len() });
    }
    if let Some(i) = durations.iter().position(|&d| d == 0) {
        return Err(Error::invalid("length regulator", format!("phoneme {i} has zero duration")));
    }
    let index: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect();
    g.gather_rows(h, Rc::new(index))
}

/// Positional encoding, FFT blocks and a projection to mel bins.
#[derive(Clone, Debug)]
pub struct MelDecoder {
    pub blocks: Vec<FftBlock>,
    pub output: Linear,
}

impl MelDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, layers: usize, mel_bins: usize, fft: &FftConfig) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| FftBlock::new(store, &format!("{name}.layer{i}"), fft))
            .collect::<Result<_>>()?;
        Ok(MelDecoder { blocks, output: Linear::new(store, &format!("{name}.mel"), fft.hidden, mel_bins) })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, frames: Var) -> Result<Var> {
        let (steps, dim) = g.shape(frames);
        let pos = g.constant(sinusoid_positions(steps, dim));
        let mut h = g.add(frames, pos)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        self.output.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mel: f64,
    pub pitch: f64,
    pub energy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mel: 1.0, pitch: 0.1, energy: 0.1 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mel: Var,
    pub pitch: Var,
    pub energy: Var,
}

/// Loss values read off the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mel: f64,
    pub pitch: f64,
    pub energy: f64,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, g: &Graph<'_, T>) -> LossBreakdown {
        let v = |x: Var| g.value(x)[[0, 0]].as_f64();
        LossBreakdown { total: v(self.total), mel: v(self.mel), pitch: v(self.pitch), energy: v(self.energy) }
    }
}

/// `w_mel·L1(mel) + w_pitch·MSE(log-pitch) + w_energy·MSE(energy)`, each
/// term a mean over its elements.
pub fn compute_losses<T: Scalar>(
    g: &mut Graph<'_, T>,
    mel: Var,
    log_pitch: Var,
    energy: Var,
    sample: &DubbingSample<T>,
    weights: &LossWeights,
) -> Result<LossVars> {
    let n = sample.len();
    let check = |context: &'static str, got: (usize, usize), expected: (usize, usize)| {
        if got.0 != expected.0 {
            Err(Error::Shape { context, axis: "rows", expected: expected.0, got: got.0 })
        } else if got.1 != expected.1 {
            Err(Error::Shape { context, axis: "cols", expected: expected.1, got: got.1 })
        } else {
            Ok(())
        }
    };
    check("mel loss", g.shape(mel), sample.mel.dim())?;
    check("pitch loss", g.shape(log_pitch), (n, 1))?;
    check("energy loss", g.shape(energy), (n, 1))?;

    let mel_target = g.constant(sample.mel.clone());
    let d = g.sub(mel, mel_target)?;
    let d = g.abs(d);
    let mel_loss = g.mean(d);

    let mse = |g: &mut Graph<'_, T>, pred: Var, target: &ndarray::Array1<T>| -> Result<Var> {
        let t = g.constant(target.clone().into_shape_with_order((n, 1)).expect("column"));
        let d = g.sub(pred, t)?;
        let sq = g.mul(d, d)?;
        Ok(g.mean(sq))
    };
    let pitch_loss = mse(g, log_pitch, &sample.log_pitch)?;
    let energy_loss = mse(g, energy, &sample.energy)?;

    let a = g.scale(mel_loss, T::lit(weights.mel));
    let b = g.scale(pitch_loss, T::lit(weights.pitch));
    let c = g.scale(energy_loss, T::lit(weights.energy));
    let total = g.add(a, b)?;
    let total = g.add(total, c)?;
    Ok(LossVars { total, mel: mel_loss, pitch: pitch_loss, energy: energy_loss })
}
