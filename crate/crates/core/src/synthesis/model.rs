use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationOptions, Aggregators, Side};
use crate::error::{Error, Result};
use crate::extraction::{ContextSentence, ExtractionConfig, FrontEnds, Modality, MultiscaleEncoders};
use crate::fusion::{ContextFusion, GraphOptions, InteractionGraph, NodeKind};
use crate::nncore::{Embedding, FftConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use super::ablation::{Ablation, Ablations};
use super::components::{
    compute_losses, length_regulate, AdaptorVars, ContextAwareAdaptor, CurrentEncoder, LossVars, LossWeights, MelDecoder,
    SpanEncoder, VariancePredictor, VarianceStats,
};
use super::sample::DubbingSample;

/// Architecture and target normalization of a [`DubbingModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Heads of every FFT block and attention except the graph encoder.
    pub heads: usize,
    pub gae_heads: usize,
    pub ffn_inner: usize,
    pub ffn_kernel: usize,
    pub dropout: f64,
    pub vocab: usize,
    pub mel_bins: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub lip_dim: usize,
    pub face_dim: usize,
    pub lip_layers: usize,
    pub face_layers: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub context_video_layers: usize,
    pub context_audio_layers: usize,
    pub context_text_layers: usize,
    pub aggregation_kernel: usize,
    pub fusion_kernel: usize,
    pub predictor_kernel: usize,
    pub prosody_bins: usize,
    /// One set of context encoders shared by both sides.
    pub tie_context_encoders: bool,
    pub current_text_intra: bool,
    pub intra_window: Option<usize>,
    /// Seed of the frozen synthetic front ends.
    pub front_end_seed: u64,
    pub pitch: VarianceStats,
    pub energy: VarianceStats,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            heads: 2,
            gae_heads: 2,
            ffn_inner: 1024,
            ffn_kernel: 9,
            dropout: 0.1,
            vocab: 40,
            mel_bins: 80,
            text_layers: 4,
            decoder_layers: 4,
            lip_dim: 64,
            face_dim: 64,
            lip_layers: 2,
            face_layers: 2,
            video_dim: 64,
            audio_dim: 64,
            text_dim: 64,
            context_video_layers: 2,
            context_audio_layers: 4,
            context_text_layers: 4,
            aggregation_kernel: 3,
            fusion_kernel: 3,
            predictor_kernel: 3,
            prosody_bins: 256,
            tie_context_encoders: true,
            current_text_intra: true,
            intra_window: None,
            front_end_seed: 7,
            pitch: VarianceStats { min: 4.3, max: 5.7, mean: 5.0, std: 0.2 },
            energy: VarianceStats { min: 0.0, max: 2.0, mean: 1.0, std: 0.3 },
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    /// Reduced width and depth for experiments on a single CPU core.
    pub fn reduced(hidden: usize) -> Self {
        ModelConfig {
            hidden,
            ffn_inner: 4 * hidden,
            ffn_kernel: 3,
            text_layers: 2,
            decoder_layers: 2,
            context_text_layers: 1,
            ..ModelConfig::default()
        }
    }

    /// Tiny model for finite-difference checks.
    pub fn miniature() -> Self {
        ModelConfig {
            hidden: 8,
            heads: 2,
            gae_heads: 2,
            ffn_inner: 12,
            ffn_kernel: 3,
            dropout: 0.0,
            vocab: 6,
            mel_bins: 4,
            text_layers: 1,
            decoder_layers: 1,
            lip_dim: 5,
            face_dim: 5,
            lip_layers: 1,
            face_layers: 1,
            video_dim: 5,
            audio_dim: 5,
            text_dim: 5,
            context_video_layers: 2,
            context_audio_layers: 3,
            context_text_layers: 1,
            prosody_bins: 16,
            ..ModelConfig::default()
        }
    }

    pub fn fft(&self) -> FftConfig {
        FftConfig {
            hidden: self.hidden,
            heads: self.heads,
            ffn_inner: self.ffn_inner,
            ffn_kernel: self.ffn_kernel,
            dropout: self.dropout,
        }
    }

    pub fn extraction(&self) -> ExtractionConfig {
        ExtractionConfig {
            video_dim: self.video_dim,
            audio_dim: self.audio_dim,
            vocab: self.vocab,
            video_layers: self.context_video_layers,
            audio_layers: self.context_audio_layers,
            text_layers: self.context_text_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("gae_heads", self.gae_heads),
            ("ffn_inner", self.ffn_inner),
            ("ffn_kernel", self.ffn_kernel),
            ("vocab", self.vocab),
            ("mel_bins", self.mel_bins),
            ("prosody_bins", self.prosody_bins),
            ("aggregation_kernel", self.aggregation_kernel),
            ("fusion_kernel", self.fusion_kernel),
            ("predictor_kernel", self.predictor_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        for (name, heads) in [("heads", self.heads), ("gae_heads", self.gae_heads)] {
            if self.hidden % heads != 0 {
                return Err(Error::Config(format!("model.{name} = {heads} does not divide hidden = {}", self.hidden)));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout = {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn graph_options(&self, ablations: &Ablations) -> GraphOptions {
        GraphOptions {
            intra_window: self.intra_window,
            current_text_intra: self.current_text_intra,
            interaction: !ablations.contains(Ablation::IntImf),
        }
    }
}

/// Extraction, aggregation and fusion for one context side.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub encoders: MultiscaleEncoders,
    pub aggregators: Aggregators,
    pub fusion: ContextFusion,
}

impl ContextEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let fft = cfg.fft();
        Ok(ContextEncoder {
            encoders: MultiscaleEncoders::new(store, &format!("{name}.extract"), &cfg.extraction(), &fft)?,
            aggregators: Aggregators::new(store, &format!("{name}.aggregate"), &fft, cfg.heads, cfg.aggregation_kernel)?,
            fusion: ContextFusion::new(store, &format!("{name}.fuse"), cfg.hidden, cfg.gae_heads, cfg.fusion_kernel, cfg.dropout)?,
        })
    }

    /// Fused `(L_cur, hidden)` context of one sentence, or `None` when every
    /// modality is ablated.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        sentence: &ContextSentence<T>,
        t_cur: Var,
        front_ends: &FrontEnds<T>,
        ablations: &Ablations,
        graph_opts: &GraphOptions,
    ) -> Result<Option<Var>> {
        let steps = g.shape(t_cur).0;
        let opts = AggregationOptions {
            use_global: !ablations.contains(Ablation::Global),
            use_local: !ablations.contains(Ablation::Local),
            interaction: !ablations.contains(Ablation::IntIma),
        };
        let mut features = Vec::with_capacity(4);
        for modality in [Modality::Video, Modality::Text, Modality::Audio] {
            let removed = match modality {
                Modality::Video => Ablation::Video,
                Modality::Text => Ablation::Text,
                Modality::Audio => Ablation::Audio,
            };
            if ablations.contains(removed) {
                continue;
            }
            let glf = self.encoders.encode(g, modality, sentence, front_ends)?;
            let agg = self.aggregators.get(modality);
            let out = if ablations.contains(Ablation::Ima) {
                agg.forward_bypass(g, steps, &glf, opts)?
            } else {
                agg.forward(g, t_cur, &glf, opts)?
            };
            features.push((NodeKind::from(modality), out.seq));
        }
        if features.is_empty() {
            return Ok(None);
        }
        features.push((NodeKind::CurrentText, t_cur));
        let kinds: Vec<_> = features.iter().map(|&(k, _)| (k, steps)).collect();
        let graph = InteractionGraph::build(&kinds, graph_opts)?;
        let fused = self.fusion.forward(g, &graph, &features, !ablations.contains(Ablation::Imf))?;
        Ok(Some(fused))
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub ablations: Ablations,
    /// Prosody embeddings come from the targets instead of the predictions.
    pub teacher_forcing: bool,
}

impl ForwardOptions {
    pub fn training(ablations: Ablations) -> Self {
        ForwardOptions { ablations, teacher_forcing: true }
    }

    pub fn inference(ablations: Ablations) -> Self {
        ForwardOptions { ablations, teacher_forcing: false }
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub t_cur: Var,
    pub h: Var,
    pub fused_pre: Option<Var>,
    pub fused_fol: Option<Var>,
    pub adaptor: AdaptorVars,
    /// `(phonemes, 1)` natural-log pitch.
    pub log_pitch: Var,
    /// `(phonemes, 1)`
    pub energy: Var,
    /// `(frames, mel_bins)`
    pub mel: Var,
    pub lip_skipped: bool,
    pub face_skipped: bool,
}

/// Materialized model outputs.
#[derive(Clone, Debug)]
pub struct Predictions<T> {
    pub log_pitch: Array1<T>,
    pub energy: Array1<T>,
    pub mel: Array2<T>,
}

impl ForwardVars {
    pub fn materialize<T: Scalar>(&self, g: &Graph<'_, T>) -> Predictions<T> {
        let column = |v: Var| g.value(v).column(0).to_owned();
        Predictions {
            log_pitch: column(self.log_pitch),
            energy: column(self.energy),
            mel: g.value(self.mel).clone(),
        }
    }
}

/// Context-aware non-autoregressive dubbing synthesizer.
#[derive(Clone, Debug)]
pub struct DubbingModel {
    pub config: ModelConfig,
    pub current: CurrentEncoder,
    /// One entry when the sides share weights, otherwise previous then
    /// following.
    pub contexts: Vec<ContextEncoder>,
    pub adaptor: ContextAwareAdaptor,
    pub face: SpanEncoder,
    pub pitch: VariancePredictor,
    pub energy: VariancePredictor,
    pub pitch_embedding: Embedding,
    pub energy_embedding: Embedding,
    pub decoder: MelDecoder,
}

impl DubbingModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let fft = config.fft();
        let h = config.hidden;
        let current = CurrentEncoder::new(store, "current", config.vocab, config.text_layers, config.lip_dim, config.lip_layers, &fft)?;
        let contexts = if config.tie_context_encoders {
            vec![ContextEncoder::new(store, "context", &config)?]
        } else {
            vec![
                ContextEncoder::new(store, "context.previous", &config)?,
                ContextEncoder::new(store, "context.following", &config)?,
            ]
        };
        Ok(DubbingModel {
            adaptor: ContextAwareAdaptor::new(store, "adaptor", h, config.heads)?,
            face: SpanEncoder::new(store, "face", config.face_dim, h, config.face_layers, config.dropout),
            pitch: VariancePredictor::new(store, "prosody.pitch", h, config.predictor_kernel, config.dropout),
            energy: VariancePredictor::new(store, "prosody.energy", h, config.predictor_kernel, config.dropout),
            pitch_embedding: Embedding::new(store, "prosody.pitch_embedding", config.prosody_bins, h),
            energy_embedding: Embedding::new(store, "prosody.energy_embedding", config.prosody_bins, h),
            decoder: MelDecoder::new(store, "decoder", config.decoder_layers, config.mel_bins, &fft)?,
            current,
            contexts,
            config,
        })
    }

    /// Frozen front ends matching this configuration.
    pub fn front_ends<T: Scalar>(&self) -> FrontEnds<T> {
        let c = &self.config;
        FrontEnds::synthetic(c.front_end_seed, c.video_dim, c.text_dim, c.audio_dim, c.hidden)
    }

    pub fn context_encoder(&self, side: Side) -> &ContextEncoder {
        match side {
            Side::Previous => &self.contexts[0],
            Side::Following => &self.contexts[self.contexts.len() - 1],
        }
    }

    /// Fused context of one side, `None` when absent or ablated.
    pub fn encode_side<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        side: Side,
        sample: &DubbingSample<T>,
        t_cur: Var,
        front_ends: &FrontEnds<T>,
        ablations: &Ablations,
    ) -> Result<Option<Var>> {
        let (sentence, flag) = match side {
            Side::Previous => (sample.context_pre.as_ref(), Ablation::Previous),
            Side::Following => (sample.context_fol.as_ref(), Ablation::Following),
        };
        let Some(sentence) = sentence else { return Ok(None) };
        if ablations.contains(flag) {
            return Ok(None);
        }
        let graph_opts = self.config.graph_options(ablations);
        self.context_encoder(side).forward(g, sentence, t_cur, front_ends, ablations, &graph_opts)
    }

    /// Prosody bucket embeddings summed, from targets or predictions.
    fn prosody_embedding<T: Scalar>(&self, g: &mut Graph<'_, T>, pitch: &[f64], energy: &[f64]) -> Result<Var> {
        let bins = self.config.prosody_bins;
        let p: Vec<usize> = pitch.iter().map(|&v| self.config.pitch.bucket(v, bins)).collect();
        let e: Vec<usize> = energy.iter().map(|&v| self.config.energy.bucket(v, bins)).collect();
        let p = self.pitch_embedding.forward(g, &p)?;
        let e = self.energy_embedding.forward(g, &e)?;
        g.add(p, e)
    }

    fn denormalize<T: Scalar>(g: &mut Graph<'_, T>, z: Var, stats: &VarianceStats) -> Result<Var> {
        let scaled = g.scale(z, T::lit(stats.std));
        let offset = g.constant(Array2::from_elem(g.shape(z), T::lit(stats.mean)));
        g.add(scaled, offset)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        sample: &DubbingSample<T>,
        front_ends: &FrontEnds<T>,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars> {
        let ab = &opts.ablations;
        let current = self.current.forward(g, &sample.phonemes, sample.lip.as_ref(), &sample.durations)?;
        let fused_pre = self.encode_side(g, Side::Previous, sample, current.t_cur, front_ends, ab)?;
        let fused_fol = self.encode_side(g, Side::Following, sample, current.t_cur, front_ends, ab)?;

        let adaptor = if ab.contains(Ablation::Caa) {
            // contexts averaged and added without gating or attention
            let present: Vec<Var> = [fused_pre, fused_fol].into_iter().flatten().collect();
            let seq = match present.as_slice() {
                [] => current.h,
                [one] => g.add(current.h, *one)?,
                [a, b] => {
                    let sum = g.add(*a, *b)?;
                    let avg = g.scale(sum, T::lit(0.5));
                    g.add(current.h, avg)?
                }
                _ => unreachable!("at most two sides"),
            };
            AdaptorVars { seq, fused: None, attention: None }
        } else {
            self.adaptor.forward(g, current.h, fused_pre, fused_fol)?
        };

        let face = self.face.forward(g, sample.face.as_ref(), &sample.durations)?;
        let face_skipped = face.is_none();
        let x = match face {
            Some(f) => g.add(adaptor.seq, f)?,
            None => adaptor.seq,
        };
        let pitch_z = self.pitch.forward(g, x)?;
        let energy_z = self.energy.forward(g, x)?;
        let log_pitch = Self::denormalize(g, pitch_z, &self.config.pitch)?;
        let energy = Self::denormalize(g, energy_z, &self.config.energy)?;

        let (p, e): (Vec<f64>, Vec<f64>) = if opts.teacher_forcing {
            (
                sample.log_pitch.iter().map(|v| v.as_f64()).collect(),
                sample.energy.iter().map(|v| v.as_f64()).collect(),
            )
        } else {
            (
                g.value(log_pitch).iter().map(|v| v.as_f64()).collect(),
                g.value(energy).iter().map(|v| v.as_f64()).collect(),
            )
        };
        let prosody = self.prosody_embedding(g, &p, &e)?;
        let x = g.add(x, prosody)?;
        let frames = length_regulate(g, x, &sample.durations)?;
        let mel = self.decoder.forward(g, frames)?;

        Ok(ForwardVars {
            t_cur: current.t_cur,
            h: current.h,
            fused_pre,
            fused_fol,
            adaptor,
            log_pitch,
            energy,
            mel,
            lip_skipped: current.lip_skipped,
            face_skipped,
        })
    }

    /// Forward pass plus weighted training losses.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        sample: &DubbingSample<T>,
        front_ends: &FrontEnds<T>,
        opts: &ForwardOptions,
    ) -> Result<(ForwardVars, LossVars)> {
        let out = self.forward(g, sample, front_ends, opts)?;
        let loss = compute_losses(g, out.mel, out.log_pitch, out.energy, sample, &self.config.loss)?;
        Ok((out, loss))
    }
}
