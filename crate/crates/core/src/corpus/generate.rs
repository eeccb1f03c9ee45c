//! Synthetic triples of consecutive sentences whose prosody follows an
//! order-1 autoregression across sentences.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::ContextSentence;
use crate::nncore::FeatureSequence;
use crate::scalar::Scalar;
use crate::synthesis::DubbingSample;

/// Standard deviations of the additive noise on each generated stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseScales {
    pub video: f64,
    pub audio: f64,
    pub text: f64,
    pub lip: f64,
    pub face: f64,
    /// Natural-log pitch.
    pub pitch: f64,
    pub energy: f64,
}

impl Default for NoiseScales {
    fn default() -> Self {
        NoiseScales { video: 0.5, audio: 0.5, text: 0.5, lip: 0.3, face: 0.3, pitch: 0.02, energy: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_triples: usize,
    pub vocab: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Frames (10 ms) per phoneme.
    pub min_duration: usize,
    pub max_duration: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub lip_dim: usize,
    pub face_dim: usize,
    pub mel_bins: usize,
    /// Autoregression coefficient of the hidden prosody state.
    pub rho: f64,
    /// Standard deviation of the autoregression innovation.
    pub innovation_std: f64,
    pub pitch_base_hz: f64,
    /// Log-pitch change per unit of prosody state.
    pub pitch_gain: f64,
    pub pitch_offset_std: f64,
    pub energy_gain: f64,
    pub unvoiced_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub noise: NoiseScales,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_triples: 500,
            vocab: 40,
            min_phonemes: 8,
            max_phonemes: 20,
            min_duration: 2,
            max_duration: 6,
            video_dim: 64,
            audio_dim: 64,
            text_dim: 64,
            lip_dim: 64,
            face_dim: 64,
            mel_bins: 80,
            rho: 0.8,
            innovation_std: 1.0,
            pitch_base_hz: 150.0,
            pitch_gain: 0.1,
            pitch_offset_std: 0.05,
            energy_gain: 0.1,
            unvoiced_fraction: 0.25,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            noise: NoiseScales::default(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Frames per 40 ms face step.
    pub const FRAMES_PER_VIDEO_STEP: usize = 4;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("corpus.rho = {} must lie in (0, 1)", self.rho));
        }
        if self.num_triples == 0 || self.vocab == 0 || self.mel_bins == 0 {
            return bad("corpus.num_triples, vocab and mel_bins must be positive".into());
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return bad(format!("corpus phoneme range {}..={} is empty", self.min_phonemes, self.max_phonemes));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad(format!("corpus duration range {}..={} is empty", self.min_duration, self.max_duration));
        }
        // shortest sentence must still give 16 audio frames and 4 face steps
        if self.min_phonemes * self.min_duration < 16 {
            return bad("corpus.min_phonemes * min_duration must be at least 16 frames".into());
        }
        let dims = [self.video_dim, self.audio_dim, self.text_dim, self.lip_dim, self.face_dim];
        if dims.contains(&0) {
            return bad("corpus stream dimensions must be positive".into());
        }
        for (name, f) in [
            ("unvoiced_fraction", self.unvoiced_fraction),
            ("valid_fraction", self.valid_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("corpus.{name} = {f} outside [0, 1)"));
            }
        }
        if self.valid_fraction + self.test_fraction >= 1.0 {
            return bad("corpus valid + test fractions leave no training data".into());
        }
        let n = self.noise.clone();
        if [n.video, n.audio, n.text, n.lip, n.face, n.pitch, n.energy, self.innovation_std, self.pitch_offset_std]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("corpus noise scales must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Variance of the stationary prosody state.
    pub fn stationary_variance(&self) -> f64 {
        self.innovation_std.powi(2) / (1.0 - self.rho * self.rho)
    }

    /// `(train, valid, test)` triple counts.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.num_triples;
        let test = (n as f64 * self.test_fraction).round() as usize;
        let valid = (n as f64 * self.valid_fraction).round() as usize;
        let train = n.saturating_sub(test + valid);
        (train, valid, test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}; expected train, valid or test"))),
        }
    }
}

pub const SYMBOLS: [&str; 40] = [
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g", "hh", "ih", "iy", "jh", "k",
    "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th", "uh", "uw", "v", "w", "y", "z", "zh", "ax",
];

/// Printable symbol of a phoneme id.
pub fn phoneme_symbol(id: usize) -> String {
    SYMBOLS.get(id).map(|s| s.to_string()).unwrap_or_else(|| format!("x{id}"))
}

/// Fixed random tables shared by every sentence of a corpus.
#[derive(Clone, Debug)]
pub struct GeneratorTables {
    pub pitch_offset: Array1<f64>,
    pub energy_base: Array1<f64>,
    pub voiced: Vec<bool>,
    /// `(vocab, mel_bins)` spectral envelope per phoneme.
    pub envelope: Array2<f64>,
    pub video: StreamEncoding,
    pub audio: StreamEncoding,
    pub text: StreamEncoding,
    pub lip: StreamEncoding,
    pub face: StreamEncoding,
    /// Direction in the audio stream carrying the pitch contour.
    pub audio_pitch: Array1<f64>,
}

/// Linear encoding `state · direction + table[phoneme]` of one stream.
#[derive(Clone, Debug)]
pub struct StreamEncoding {
    /// Zero for streams that carry no prosody state.
    pub direction: Array1<f64>,
    pub table: Array2<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

impl StreamEncoding {
    fn new(rng: &mut ChaCha8Rng, vocab: usize, dim: usize, carries_state: bool) -> Self {
        let direction = if carries_state { normal_vec(rng, dim) } else { Array1::zeros(dim) };
        let table = Array2::from_shape_fn((vocab, dim), |_| StandardNormal.sample(rng));
        StreamEncoding { direction, table }
    }

    fn frame(&self, rng: &mut ChaCha8Rng, state: f64, phoneme: usize, noise: f64) -> Array1<f64> {
        let mut v = &self.direction * state + self.table.row(phoneme);
        if noise > 0.0 {
            v.mapv_inplace(|x| x + noise * rng.sample::<f64, _>(StandardNormal));
        }
        v
    }
}

impl GeneratorTables {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ab1e5);
        let v = cfg.vocab;
        let offset = Normal::new(0.0, cfg.pitch_offset_std.max(0.0)).expect("valid std");
        let pitch_offset = Array1::from_shape_fn(v, |_| offset.sample(&mut rng));
        let energy_base = Array1::from_shape_fn(v, |_| rng.random_range(0.5..1.5));
        let unvoiced = (v as f64 * cfg.unvoiced_fraction).round() as usize;
        let mut order: Vec<usize> = (0..v).collect();
        order.shuffle(&mut rng);
        let mut voiced = vec![true; v];
        for &i in &order[..unvoiced] {
            voiced[i] = false;
        }
        let bins = cfg.mel_bins;
        let envelope = {
            let mut e = Array2::zeros((v, bins));
            for mut row in e.rows_mut() {
                let parts: Vec<(f64, f64, f64)> = (0..3)
                    .map(|k| (rng.random_range(0.5..1.0) / (k + 1) as f64, rng.random_range(0.5..3.0) * (k + 1) as f64, rng.random_range(0.0..std::f64::consts::TAU)))
                    .collect();
                for (b, x) in row.iter_mut().enumerate() {
                    let u = b as f64 / bins as f64;
                    let s: f64 = parts.iter().map(|(a, f, p)| a * (std::f64::consts::TAU * f * u + p).cos()).sum();
                    // log-mel-like level falling with frequency
                    *x = -1.5 - 2.0 * u + 0.8 * s;
                }
            }
            e
        };
        GeneratorTables {
            pitch_offset,
            energy_base,
            voiced,
            envelope,
            video: StreamEncoding::new(&mut rng, v, cfg.video_dim, true),
            audio: StreamEncoding::new(&mut rng, v, cfg.audio_dim, true),
            text: StreamEncoding::new(&mut rng, v, cfg.text_dim, true),
            lip: StreamEncoding::new(&mut rng, v, cfg.lip_dim, false),
            face: StreamEncoding::new(&mut rng, v, cfg.face_dim, false),
            audio_pitch: normal_vec(&mut rng, cfg.audio_dim),
        }
    }

    /// Mel bin index of the pitch harmonic bump.
    fn pitch_bin(log_pitch: f64, bins: usize) -> f64 {
        let (lo, hi) = (60f64.ln(), 400f64.ln());
        ((log_pitch - lo) / (hi - lo)).clamp(0.0, 1.0) * (bins - 1) as f64
    }

    /// Deterministic mel target: phoneme envelope plus an energy level and,
    /// for voiced phonemes, a bump at the pitch bin; smoothed over time.
    pub fn mel(&self, phonemes: &[usize], durations: &[usize], log_pitch: &[f64], energy: &[f64]) -> Array2<f64> {
        let bins = self.envelope.ncols();
        let frames: usize = durations.iter().sum();
        let mut raw = Array2::zeros((frames, bins));
        let mut t = 0;
        for (i, (&p, &d)) in phonemes.iter().zip(durations).enumerate() {
            let centre = Self::pitch_bin(log_pitch[i], bins);
            let row: Array1<f64> = Array1::from_shape_fn(bins, |b| {
                let mut v = self.envelope[[p, b]] + 0.5 * energy[i];
                if self.voiced[p] {
                    v += (-(b as f64 - centre).powi(2) / 8.0).exp();
                }
                v
            });
            for _ in 0..d {
                raw.row_mut(t).assign(&row);
                t += 1;
            }
        }
        let mut mel = raw.clone();
        for t in 0..frames {
            let prev = raw.row(t.saturating_sub(1));
            let next = raw.row((t + 1).min(frames - 1));
            let smoothed = &prev * 0.25 + &raw.row(t) * 0.5 + &next * 0.25;
            mel.row_mut(t).assign(&smoothed);
        }
        mel
    }
}

/// One generated sentence with every stream.
#[derive(Clone, Debug)]
pub struct GeneratedSentence {
    pub id: String,
    pub state: f64,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub log_pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub voiced: Vec<bool>,
    pub words: Vec<String>,
    pub mel: Array2<f64>,
    /// 40 ms steps.
    pub video: Array2<f64>,
    /// 10 ms steps.
    pub audio: Array2<f64>,
    /// Per phoneme.
    pub text: Array2<f64>,
    pub lip: Array2<f64>,
    pub face: Array2<f64>,
}

impl GeneratedSentence {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn mean_log_pitch(&self) -> f64 {
        self.log_pitch.iter().sum::<f64>() / self.log_pitch.len() as f64
    }

    pub fn transcript(&self) -> String {
        self.words.join(" ")
    }

    fn phoneme_at_frames(&self) -> Vec<usize> {
        self.durations
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
            .collect()
    }

    pub fn context<T: Scalar>(&self) -> Result<ContextSentence<T>> {
        ContextSentence::new(
            self.id.clone(),
            FeatureSequence::new(self.video.mapv(T::lit))?,
            self.phonemes.clone(),
            FeatureSequence::new(self.audio.mapv(T::lit))?,
            Some(FeatureSequence::new(self.text.mapv(T::lit))?),
        )
    }
}

/// Previous, current and following sentence.
#[derive(Clone, Debug)]
pub struct Triple {
    pub id: String,
    pub split: Split,
    pub previous: GeneratedSentence,
    pub current: GeneratedSentence,
    pub following: GeneratedSentence,
}

impl Triple {
    pub fn to_sample<T: Scalar>(&self) -> Result<DubbingSample<T>> {
        let c = &self.current;
        let sample = DubbingSample {
            id: self.id.clone(),
            phonemes: c.phonemes.clone(),
            durations: c.durations.clone(),
            log_pitch: c.log_pitch.iter().map(|&v| T::lit(v)).collect(),
            energy: c.energy.iter().map(|&v| T::lit(v)).collect(),
            voiced: c.voiced.clone(),
            mel: c.mel.mapv(T::lit),
            lip: Some(FeatureSequence::new(c.lip.mapv(T::lit))?),
            face: Some(FeatureSequence::new(c.face.mapv(T::lit))?),
            context_pre: Some(self.previous.context()?),
            context_fol: Some(self.following.context()?),
            transcript: c.words.clone(),
        };
        sample.validate()?;
        Ok(sample)
    }
}

fn stack(rows: Vec<Array1<f64>>, dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        dst.assign(&src);
    }
    m
}

/// Sentence generator driven by one seeded stream.
pub struct Generator {
    pub cfg: CorpusConfig,
    pub tables: GeneratorTables,
    rng: ChaCha8Rng,
}

impl Generator {
    pub fn new(cfg: CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let tables = GeneratorTables::new(&cfg);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Generator { cfg, tables, rng })
    }

    fn gauss(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Hidden states `(s_pre, s_cur, s_fol)`, starting from the stationary law.
    pub fn states(&mut self) -> (f64, f64, f64) {
        let (rho, sigma) = (self.cfg.rho, self.cfg.innovation_std);
        let pre = self.cfg.stationary_variance().sqrt() * self.gauss();
        let cur = rho * pre + sigma * self.gauss();
        let fol = rho * cur + sigma * self.gauss();
        (pre, cur, fol)
    }

    pub fn sentence(&mut self, id: String, state: f64) -> GeneratedSentence {
        let cfg = self.cfg.clone();
        let n = self.rng.random_range(cfg.min_phonemes..=cfg.max_phonemes);
        let phonemes: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..cfg.vocab)).collect();
        let durations: Vec<usize> = (0..n).map(|_| self.rng.random_range(cfg.min_duration..=cfg.max_duration)).collect();
        let base = cfg.pitch_base_hz.ln();
        let log_pitch: Vec<f64> = phonemes
            .iter()
            .map(|&p| base + cfg.pitch_gain * state + self.tables.pitch_offset[p] + cfg.noise.pitch * self.gauss())
            .collect();
        let energy: Vec<f64> = phonemes
            .iter()
            .map(|&p| self.tables.energy_base[p] + cfg.energy_gain * state + cfg.noise.energy * self.gauss())
            .collect();
        let voiced: Vec<bool> = phonemes.iter().map(|&p| self.tables.voiced[p]).collect();

        let mut words = Vec::new();
        let mut i = 0;
        while i < n {
            let len = self.rng.random_range(2..=4).min(n - i);
            words.push(phonemes[i..i + len].iter().map(|&p| phoneme_symbol(p)).collect::<Vec<_>>().join("-"));
            i += len;
        }

        let mel = self.tables.mel(&phonemes, &durations, &log_pitch, &energy);
        let mut sentence = GeneratedSentence {
            id,
            state,
            phonemes,
            durations,
            log_pitch,
            energy,
            voiced,
            words,
            mel,
            video: Array2::zeros((0, 0)),
            audio: Array2::zeros((0, 0)),
            text: Array2::zeros((0, 0)),
            lip: Array2::zeros((0, 0)),
            face: Array2::zeros((0, 0)),
        };
        let at = sentence.phoneme_at_frames();
        let frames = at.len();
        let video_steps = frames / CorpusConfig::FRAMES_PER_VIDEO_STEP;
        let centre = |k: usize| at[(k * CorpusConfig::FRAMES_PER_VIDEO_STEP + 2).min(frames - 1)];

        let (tables, rng) = (&self.tables, &mut self.rng);
        let p = &sentence.phonemes;
        let noise = &cfg.noise;
        let video = (0..video_steps).map(|k| tables.video.frame(rng, state, p[centre(k)], noise.video)).collect();
        let audio = (0..frames)
            .map(|t| {
                let i = at[t];
                let mut v = tables.audio.frame(rng, state, p[i], noise.audio);
                v.scaled_add(10.0 * (sentence.log_pitch[i] - base), &tables.audio_pitch);
                v
            })
            .collect();
        let text = (0..n).map(|i| tables.text.frame(rng, state, p[i], noise.text)).collect();
        let lip = (0..video_steps).map(|k| tables.lip.frame(rng, 0.0, p[centre(k)], noise.lip)).collect();
        let face = (0..video_steps).map(|k| tables.face.frame(rng, 0.0, p[centre(k)], noise.face)).collect();
        sentence.video = stack(video, cfg.video_dim);
        sentence.audio = stack(audio, cfg.audio_dim);
        sentence.text = stack(text, cfg.text_dim);
        sentence.lip = stack(lip, cfg.lip_dim);
        sentence.face = stack(face, cfg.face_dim);
        sentence
    }

    pub fn triple(&mut self, index: usize, split: Split) -> Triple {
        let id = format!("t{index:05}");
        let (pre, cur, fol) = self.states();
        Triple {
            previous: self.sentence(format!("{id}.pre"), pre),
            current: self.sentence(format!("{id}.cur"), cur),
            following: self.sentence(format!("{id}.fol"), fol),
            id,
            split,
        }
    }

    /// Every triple of the corpus, training split first.
    pub fn triples(&mut self) -> Vec<Triple> {
        let (train, valid, _) = self.cfg.split_sizes();
        (0..self.cfg.num_triples)
            .map(|i| {
                let split = if i < train {
                    Split::Train
                } else if i < train + valid {
                    Split::Valid
                } else {
                    Split::Test
                };
                self.triple(i, split)
            })
            .collect()
    }
}

/// Generates the corpus in memory.
pub fn generate_triples(cfg: &CorpusConfig) -> Result<(Vec<Triple>, GeneratorTables)> {
    let mut generator = Generator::new(cfg.clone())?;
    let triples = generator.triples();
    Ok((triples, generator.tables))
}
