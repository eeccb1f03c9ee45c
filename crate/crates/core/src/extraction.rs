//! Multiscale feature extraction: a sentence-level global vector and a
//! quasi-phoneme-level local sequence per context modality.
//!
//! Perception front-ends are pluggable through [`FrontEnd`]; the default
//! [`SyntheticFrontEnd`] reads the feature streams stored with each corpus
//! sample and summarizes them with a frozen random projection.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{sinusoid_positions, ConvDownsampleStack, Embedding, FeatureSequence, FftBlock, FftConfig, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Text,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Text, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }

    fn seed_tag(self) -> u64 {
        match self {
            Modality::Video => 0x5649_4445,
            Modality::Text => 0x5445_5854,
            Modality::Audio => 0x4155_4449,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Raw multimodal inputs of one previous or following sentence.
#[derive(Clone, Debug)]
pub struct ContextSentence<T> {
    pub sentence_id: String,
    /// Face features at 40 ms per step.
    pub video_frames: FeatureSequence<T>,
    pub phonemes: Vec<usize>,
    /// Speech features at 10 ms per step.
    pub audio_frames: FeatureSequence<T>,
    /// Per-phoneme text features consumed by the global text front end.
    pub text_frames: Option<FeatureSequence<T>>,
}

impl<T: Scalar> ContextSentence<T> {
    pub const MIN_VIDEO_STEPS: usize = 4;

    pub fn cast<U: Scalar>(&self) -> ContextSentence<U> {
        ContextSentence {
            sentence_id: self.sentence_id.clone(),
            video_frames: self.video_frames.cast(),
            phonemes: self.phonemes.clone(),
            audio_frames: self.audio_frames.cast(),
            text_frames: self.text_frames.as_ref().map(FeatureSequence::cast),
        }
    }
    pub const MIN_AUDIO_STEPS: usize = 16;

    pub fn new(
        sentence_id: impl Into<String>,
        video_frames: FeatureSequence<T>,
        phonemes: Vec<usize>,
        audio_frames: FeatureSequence<T>,
        text_frames: Option<FeatureSequence<T>>,
    ) -> Result<Self> {
        if video_frames.steps() < Self::MIN_VIDEO_STEPS {
            return Err(Error::TooShort { context: "context video", min: Self::MIN_VIDEO_STEPS, got: video_frames.steps() });
        }
        if audio_frames.steps() < Self::MIN_AUDIO_STEPS {
            return Err(Error::TooShort { context: "context audio", min: Self::MIN_AUDIO_STEPS, got: audio_frames.steps() });
        }
        if phonemes.is_empty() {
            return Err(Error::TooShort { context: "context phonemes", min: 1, got: 0 });
        }
        Ok(ContextSentence {
            sentence_id: sentence_id.into(),
            video_frames,
            phonemes,
            audio_frames,
            text_frames,
        })
    }
}

/// Perception front end for one modality.
pub trait FrontEnd<T: Scalar> {
    fn modality(&self) -> Modality;

    /// Frame-level features fed to the local encoder.
    fn frame_features(&self, sentence: &ContextSentence<T>) -> Result<FeatureSequence<T>>;

    /// Sentence-level global feature.
    fn sentence_feature(&self, sentence: &ContextSentence<T>) -> Result<Array1<T>>;
}

/// Frozen stand-in for a pretrained extractor: returns the stored stream and
/// projects its temporal mean through a fixed random affine map.
#[derive(Clone, Debug)]
pub struct SyntheticFrontEnd<T> {
    modality: Modality,
    projection: Array2<T>,
    bias: Array1<T>,
}

impl<T: Scalar> SyntheticFrontEnd<T> {
    pub fn new(modality: Modality, seed: u64, raw_dim: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ modality.seed_tag());
        let w = Normal::new(0.0, (1.0 / raw_dim as f64).sqrt()).expect("valid std");
        let b = Normal::new(0.0, 0.1).expect("valid std");
        let projection = Array2::from_shape_fn((raw_dim, out_dim), |_| T::lit(w.sample(&mut rng)));
        let bias = Array1::from_shape_fn(out_dim, |_| T::lit(b.sample(&mut rng)));
        SyntheticFrontEnd { modality, projection, bias }
    }

    pub fn bias(&self) -> &Array1<T> {
        &self.bias
    }

    fn stream<'a>(&self, sentence: &'a ContextSentence<T>) -> Result<&'a FeatureSequence<T>> {
        match self.modality {
            Modality::Video => Ok(&sentence.video_frames),
            Modality::Audio => Ok(&sentence.audio_frames),
            Modality::Text => sentence.text_frames.as_ref().ok_or_else(|| Error::Record {
                id: sentence.sentence_id.clone(),
                field: "text_frames",
                message: "stream missing".into(),
            }),
        }
    }
}

impl<T: Scalar> FrontEnd<T> for SyntheticFrontEnd<T> {
    fn modality(&self) -> Modality {
        self.modality
    }

    fn frame_features(&self, sentence: &ContextSentence<T>) -> Result<FeatureSequence<T>> {
        self.stream(sentence).cloned()
    }

    fn sentence_feature(&self, sentence: &ContextSentence<T>) -> Result<Array1<T>> {
        let stream = self.stream(sentence)?;
        if stream.hidden_dim() != self.projection.nrows() {
            return Err(Error::Shape {
                context: "front end projection",
                axis: "hidden_dim",
                expected: self.projection.nrows(),
                got: stream.hidden_dim(),
            });
        }
        let mean = stream.data().mean_axis(Axis(0)).expect("non-empty stream");
        Ok(mean.dot(&self.projection) + &self.bias)
    }
}

/// One front end per modality.
pub struct FrontEnds<T: Scalar> {
    pub video: Box<dyn FrontEnd<T>>,
    pub text: Box<dyn FrontEnd<T>>,
    pub audio: Box<dyn FrontEnd<T>>,
}

impl<T: Scalar> FrontEnds<T> {
    /// Synthetic front ends for a corpus generated with `seed` and the given
    /// raw stream widths.
    pub fn synthetic(seed: u64, video_dim: usize, text_dim: usize, audio_dim: usize, out_dim: usize) -> Self {
        FrontEnds {
            video: Box::new(SyntheticFrontEnd::new(Modality::Video, seed, video_dim, out_dim)),
            text: Box::new(SyntheticFrontEnd::new(Modality::Text, seed, text_dim, out_dim)),
            audio: Box::new(SyntheticFrontEnd::new(Modality::Audio, seed, audio_dim, out_dim)),
        }
    }

    pub fn get(&self, modality: Modality) -> &dyn FrontEnd<T> {
        match modality {
            Modality::Video => self.video.as_ref(),
            Modality::Text => self.text.as_ref(),
            Modality::Audio => self.audio.as_ref(),
        }
    }
}

/// Tape handles for a modality's global and local features.
#[derive(Clone, Copy, Debug)]
pub struct GlobalLocalVars {
    pub modality: Modality,
    /// `(1, hidden)`
    pub global: Var,
    /// `(local_steps, hidden)`
    pub local: Var,
}

/// Materialized global/local pair.
#[derive(Clone, Debug)]
pub struct GlobalLocalFeatures<T> {
    pub modality: Modality,
    pub global_vec: Array1<T>,
    pub local_seq: FeatureSequence<T>,
}

impl GlobalLocalVars {
    pub fn materialize<T: Scalar>(&self, g: &Graph<'_, T>) -> Result<GlobalLocalFeatures<T>> {
        Ok(GlobalLocalFeatures {
            modality: self.modality,
            global_vec: g.value(self.global).row(0).to_owned(),
            local_seq: FeatureSequence::new(g.value(self.local).clone())?,
        })
    }
}

/// Input projection, downsample stack, Tanh, linear, FFT block.
#[derive(Clone, Debug)]
pub struct DownsampleEncoder {
    pub input: Linear,
    pub stack: ConvDownsampleStack,
    pub output: Linear,
    pub block: FftBlock,
}

impl DownsampleEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, raw_dim: usize, layers: usize, fft: &FftConfig) -> Result<Self> {
        Ok(DownsampleEncoder {
            input: Linear::new(store, &format!("{name}.input"), raw_dim, fft.hidden),
            stack: ConvDownsampleStack::new(store, &format!("{name}.downsample"), fft.hidden, fft.hidden, layers, fft.dropout),
            output: Linear::new(store, &format!("{name}.output"), fft.hidden, fft.hidden),
            block: FftBlock::new(store, &format!("{name}.fft"), fft)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, frames: Var) -> Result<Var> {
        let steps = g.shape(frames).0;
        if steps < self.stack.min_steps() {
            return Err(Error::TooShort { context: "conv downsample stack", min: self.stack.min_steps(), got: steps });
        }
        let h = self.input.forward(g, frames)?;
        let h = self.stack.forward(g, h)?;
        let h = g.tanh(h);
        let h = self.output.forward(g, h)?;
        self.block.forward(g, h)
    }
}

/// Phoneme embedding plus sinusoidal positions followed by FFT blocks.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: Embedding,
    pub blocks: Vec<FftBlock>,
}

impl TextEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, vocab: usize, layers: usize, fft: &FftConfig) -> Result<Self> {
        let embedding = Embedding::new(store, &format!("{name}.embedding"), vocab, fft.hidden);
        let blocks = (0..layers)
            .map(|i| FftBlock::new(store, &format!("{name}.layer{i}"), fft))
            .collect::<Result<_>>()?;
        Ok(TextEncoder { embedding, blocks })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, phonemes: &[usize]) -> Result<Var> {
        if phonemes.is_empty() {
            return Err(Error::TooShort { context: "text encoder", min: 1, got: 0 });
        }
        let emb = self.embedding.forward(g, phonemes)?;
        let pos = g.constant(sinusoid_positions(phonemes.len(), self.embedding.dim));
        let mut h = g.add(emb, pos)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Per-modality local encoders of one context-interaction encoder.
#[derive(Clone, Debug)]
pub struct MultiscaleEncoders {
    pub video: DownsampleEncoder,
    pub audio: DownsampleEncoder,
    pub text: TextEncoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub video_dim: usize,
    pub audio_dim: usize,
    pub vocab: usize,
    pub video_layers: usize,
    pub audio_layers: usize,
    pub text_layers: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            video_dim: 64,
            audio_dim: 64,
            vocab: 40,
            video_layers: 2,
            audio_layers: 4,
            text_layers: 4,
        }
    }
}

impl MultiscaleEncoders {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ExtractionConfig, fft: &FftConfig) -> Result<Self> {
        Ok(MultiscaleEncoders {
            video: DownsampleEncoder::new(store, &format!("{name}.video"), cfg.video_dim, cfg.video_layers, fft)?,
            audio: DownsampleEncoder::new(store, &format!("{name}.audio"), cfg.audio_dim, cfg.audio_layers, fft)?,
            text: TextEncoder::new(store, &format!("{name}.text"), cfg.vocab, cfg.text_layers, fft)?,
        })
    }

    fn global<T: Scalar>(g: &mut Graph<'_, T>, front_end: &dyn FrontEnd<T>, sentence: &ContextSentence<T>) -> Result<Var> {
        let vec = front_end.sentence_feature(sentence)?;
        let n = vec.len();
        Ok(g.constant(vec.into_shape_with_order((1, n)).expect("row vector")))
    }

    pub fn encode_video<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        sentence: &ContextSentence<T>,
        front_end: &dyn FrontEnd<T>,
    ) -> Result<GlobalLocalVars> {
        let frames = front_end.frame_features(sentence)?.into_inner();
        let frames = g.constant(frames);
        let local = self.video.forward(g, frames)?;
        let global = Self::global(g, front_end, sentence)?;
        Ok(GlobalLocalVars { modality: Modality::Video, global, local })
    }

    pub fn encode_audio<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        sentence: &ContextSentence<T>,
        front_end: &dyn FrontEnd<T>,
    ) -> Result<GlobalLocalVars> {
        let frames = front_end.frame_features(sentence)?.into_inner();
        let frames = g.constant(frames);
        let local = self.audio.forward(g, frames)?;
        let global = Self::global(g, front_end, sentence)?;
        Ok(GlobalLocalVars { modality: Modality::Audio, global, local })
    }

    pub fn encode_text<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        sentence: &ContextSentence<T>,
        front_end: &dyn FrontEnd<T>,
    ) -> Result<GlobalLocalVars> {
        let local = self.text.forward(g, &sentence.phonemes)?;
        let global = Self::global(g, front_end, sentence)?;
        Ok(GlobalLocalVars { modality: Modality::Text, global, local })
    }

    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        modality: Modality,
        sentence: &ContextSentence<T>,
        front_ends: &FrontEnds<T>,
    ) -> Result<GlobalLocalVars> {
        let fe = front_ends.get(modality);
        match modality {
            Modality::Video => self.encode_video(g, sentence, fe),
            Modality::Text => self.encode_text(g, sentence, fe),
            Modality::Audio => self.encode_audio(g, sentence, fe),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::downsampled_len;

    fn small_fft() -> FftConfig {
        FftConfig { hidden: 16, heads: 2, ffn_inner: 32, ffn_kernel: 3, dropout: 0.1 }
    }

    fn sentence(video: usize, audio: usize, phonemes: usize, raw: usize) -> ContextSentence<f64> {
        let stream = |n: usize, k: f64| {
            FeatureSequence::new(Array2::from_shape_fn((n, raw), |(i, j)| ((i * raw + j) as f64 * k).sin())).unwrap()
        };
        ContextSentence::new(
            "s",
            stream(video, 0.13),
            (0..phonemes).map(|i| i % 7).collect(),
            stream(audio, 0.07),
            Some(stream(phonemes, 0.29)),
        )
        .unwrap()
    }

    fn setup() -> (ParamStore<f64>, MultiscaleEncoders, FrontEnds<f64>) {
        let cfg = ExtractionConfig { video_dim: 6, audio_dim: 6, vocab: 10, text_layers: 1, ..Default::default() };
        let mut store = ParamStore::new(21);
        let enc = MultiscaleEncoders::new(&mut store, "ctx", &cfg, &small_fft()).unwrap();
        (store, enc, FrontEnds::synthetic(5, 6, 6, 6, 16))
    }

    #[test]
    fn local_lengths_follow_downsampling() {
        let (store, enc, fe) = setup();
        for (video, audio, expect_v, expect_a) in [(40, 64, 10, 4), (17, 160, 4, 10), (4, 16, 1, 1)] {
            let s = sentence(video, audio, 12, 6);
            let mut g = Graph::new(&store);
            let v = enc.encode(&mut g, Modality::Video, &s, &fe).unwrap();
            let a = enc.encode(&mut g, Modality::Audio, &s, &fe).unwrap();
            let t = enc.encode(&mut g, Modality::Text, &s, &fe).unwrap();
            assert_eq!(g.shape(v.local), (expect_v, 16));
            assert_eq!(g.shape(a.local), (expect_a, 16));
            assert_eq!(g.shape(t.local), (12, 16));
            assert_eq!(g.shape(v.global), (1, 16));
            assert_eq!(downsampled_len(video, 2), expect_v);
        }
    }

    #[test]
    fn deterministic_in_eval_mode() {
        let (store, enc, fe) = setup();
        let s = sentence(20, 40, 5, 6);
        let run = || {
            let mut g = Graph::new(&store);
            let v = enc.encode(&mut g, Modality::Video, &s, &fe).unwrap();
            v.materialize(&g).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.local_seq, b.local_seq);
        assert_eq!(a.global_vec, b.global_vec);
    }

    #[test]
    fn single_phoneme_text() {
        let (store, enc, fe) = setup();
        let s = sentence(8, 16, 1, 6);
        let mut g = Graph::new(&store);
        let t = enc.encode(&mut g, Modality::Text, &s, &fe).unwrap();
        assert_eq!(g.shape(t.local), (1, 16));
    }

    #[test]
    fn text_local_path_ignores_front_end() {
        let (store, enc, fe) = setup();
        let other = FrontEnds::<f64>::synthetic(99, 6, 6, 6, 16);
        let s = sentence(8, 16, 6, 6);
        let mut g = Graph::new(&store);
        let a = enc.encode(&mut g, Modality::Text, &s, &fe).unwrap().materialize(&g).unwrap();
        let b = enc.encode(&mut g, Modality::Text, &s, &other).unwrap().materialize(&g).unwrap();
        assert_eq!(a.local_seq, b.local_seq);
        assert_ne!(a.global_vec, b.global_vec);
    }

    #[test]
    fn unknown_phoneme_is_named() {
        let (store, enc, fe) = setup();
        let mut s = sentence(8, 16, 3, 6);
        s.phonemes[1] = 10;
        let mut g = Graph::new(&store);
        match enc.encode(&mut g, Modality::Text, &s, &fe) {
            Err(Error::UnknownPhoneme { id, .. }) => assert_eq!(id, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_short_audio_is_rejected() {
        let (store, enc, fe) = setup();
        let mut s = sentence(8, 16, 3, 6);
        s.audio_frames = FeatureSequence::new(Array2::zeros((15, 6))).unwrap();
        let mut g = Graph::new(&store);
        assert!(matches!(enc.encode(&mut g, Modality::Audio, &s, &fe), Err(Error::TooShort { .. })));
    }

    #[test]
    fn synthetic_front_end_properties() {
        let fe = SyntheticFrontEnd::<f64>::new(Modality::Audio, 3, 6, 16);
        let mut s = sentence(8, 20, 3, 6);
        s.audio_frames = FeatureSequence::new(Array2::zeros((20, 6))).unwrap();
        assert_eq!(fe.sentence_feature(&s).unwrap(), fe.bias().clone());

        let s = sentence(8, 20, 3, 6);
        let mut reversed = s.clone();
        let mut data = s.audio_frames.data().clone();
        data.invert_axis(Axis(0));
        reversed.audio_frames = FeatureSequence::new(data).unwrap();
        let a = fe.sentence_feature(&s).unwrap();
        let b = fe.sentence_feature(&reversed).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(fe.frame_features(&s).unwrap(), s.audio_frames);

        let text = SyntheticFrontEnd::<f64>::new(Modality::Text, 3, 6, 16);
        let mut missing = s.clone();
        missing.text_frames = None;
        assert!(text.sentence_feature(&missing).is_err());
    }
}
