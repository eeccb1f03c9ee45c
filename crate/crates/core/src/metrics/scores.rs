use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::f0::{F0_MAX, F0_MIN};

/// Relative pitch error above which a frame counts as a gross error.
pub const GROSS_ERROR: f64 = 0.2;

/// Per-frame F0 at a 10 ms hop; 0 marks an unvoiced frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    f0: Vec<f64>,
}

impl PitchTrack {
    /// Voicing is `f0 > 0`; voiced values must lie in `[50, 600]` Hz.
    pub fn from_f0(f0: Vec<f64>) -> Result<Self> {
        for (i, &v) in f0.iter().enumerate() {
            if !v.is_finite() || v < 0.0 || (v > 0.0 && !(F0_MIN..=F0_MAX).contains(&v)) {
                return Err(Error::invalid("pitch track", format!("frame {i} has f0 {v} outside {{0}} ∪ [{F0_MIN}, {F0_MAX}]")));
            }
        }
        Ok(PitchTrack { f0 })
    }

    /// Frame-level track from per-phoneme natural-log pitch. Each phoneme
    /// spans `durations[i]` frames; unvoiced phonemes give 0 and voiced ones
    /// are clamped into the tracker range.
    pub fn from_phonemes(log_pitch: &[f64], voiced: &[bool], durations: &[usize]) -> Result<Self> {
        if log_pitch.len() != voiced.len() || log_pitch.len() != durations.len() {
            return Err(Error::Shape {
                context: "pitch track",
                axis: "phonemes",
                expected: durations.len(),
                got: log_pitch.len().min(voiced.len()),
            });
        }
        let mut f0 = Vec::with_capacity(durations.iter().sum());
        for ((&lp, &v), &d) in log_pitch.iter().zip(voiced).zip(durations) {
            if !lp.is_finite() {
                return Err(Error::NonFinite("log pitch".into()));
            }
            let hz = if v { lp.exp().clamp(F0_MIN, F0_MAX) } else { 0.0 };
            f0.extend(std::iter::repeat_n(hz, d));
        }
        Ok(PitchTrack { f0 })
    }

    pub fn f0(&self) -> &[f64] {
        &self.f0
    }

    pub fn voiced(&self) -> Vec<bool> {
        self.f0.iter().map(|&v| v > 0.0).collect()
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }
}

fn aligned<'a>(reference: &'a PitchTrack, synthesized: &'a PitchTrack) -> impl Iterator<Item = (f64, f64)> + 'a {
    if reference.len() != synthesized.len() {
        warn!(
            "pitch tracks differ in length ({} vs {} frames); truncating to {}",
            reference.len(),
            synthesized.len(),
            reference.len().min(synthesized.len())
        );
    }
    reference.f0.iter().copied().zip(synthesized.f0.iter().copied())
}

fn gross(reference: f64, synthesized: f64) -> bool {
    (synthesized - reference).abs() / reference > GROSS_ERROR
}

/// Gross pitch error in percent over frames voiced in both tracks. `None`
/// when no frame is jointly voiced.
pub fn gpe(reference: &PitchTrack, synthesized: &PitchTrack) -> Option<f64> {
    let (mut joint, mut errors) = (0usize, 0usize);
    for (r, s) in aligned(reference, synthesized) {
        if r > 0.0 && s > 0.0 {
            joint += 1;
            errors += gross(r, s) as usize;
        }
    }
    (joint > 0).then(|| 100.0 * errors as f64 / joint as f64)
}

/// F0 frame error in percent over all frames: voicing disagreements plus
/// jointly voiced gross pitch errors. Empty tracks score 0.
pub fn ffe(reference: &PitchTrack, synthesized: &PitchTrack) -> f64 {
    let (mut frames, mut errors) = (0usize, 0usize);
    for (r, s) in aligned(reference, synthesized) {
        frames += 1;
        let wrong = match (r > 0.0, s > 0.0) {
            (true, true) => gross(r, s),
            (a, b) => a != b,
        };
        errors += wrong as usize;
    }
    if frames == 0 {
        return 0.0;
    }
    100.0 * errors as f64 / frames as f64
}

/// Case-folded, punctuation-stripped word sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    words: Vec<String>,
}

impl Transcript {
    pub fn new(text: &str) -> Self {
        Self::from_words(text.split_whitespace())
    }

    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let words = words
            .into_iter()
            .map(|w| w.as_ref().chars().filter(|c| !c.is_ascii_punctuation()).flat_map(char::to_lowercase).collect::<String>())
            .filter(|w| !w.is_empty())
            .collect();
        Transcript { words }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance(reference: &[String], hypothesis: &[String]) -> usize {
    let mut row: Vec<usize> = (0..=hypothesis.len()).collect();
    for (i, r) in reference.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let next = (diag + (r != h) as usize).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[hypothesis.len()]
}

/// Word error rate: edit distance over reference length.
pub fn wer(reference: &Transcript, hypothesis: &Transcript) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("wer", "reference transcript is empty"));
    }
    Ok(edit_distance(&reference.words, &hypothesis.words) as f64 / reference.len() as f64)
}
