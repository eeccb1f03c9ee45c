use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::extraction::ContextSentence;
use crate::nncore::FeatureSequence;
use crate::scalar::Scalar;

/// Current sentence with its targets and optional neighbouring sentences.
#[derive(Clone, Debug)]
pub struct DubbingSample<T> {
    pub id: String,
    pub phonemes: Vec<usize>,
    /// Frames (10 ms hop) per phoneme.
    pub durations: Vec<usize>,
    /// Natural-log pitch per phoneme.
    pub log_pitch: Array1<T>,
    pub energy: Array1<T>,
    /// Whether each phoneme is voiced; pitch of unvoiced phonemes is the
    /// interpolated contour.
    pub voiced: Vec<bool>,
    /// `(frames, mel_bins)`
    pub mel: Array2<T>,
    /// Lip features at 40 ms per step.
    pub lip: Option<FeatureSequence<T>>,
    /// Face features at 40 ms per step.
    pub face: Option<FeatureSequence<T>>,
    pub context_pre: Option<ContextSentence<T>>,
    pub context_fol: Option<ContextSentence<T>>,
    pub transcript: Vec<String>,
}

impl<T: Scalar> DubbingSample<T> {
    /// Checks the per-phoneme arrays agree, durations are positive and sum to
    /// the mel frame count, and targets are finite.
    pub fn validate(&self) -> Result<()> {
        let record = |field: &'static str, message: String| Error::Record { id: self.id.clone(), field, message };
        let n = self.phonemes.len();
        if n == 0 {
            return Err(record("phonemes", "empty".into()));
        }
        for (field, len) in [
            ("durations", self.durations.len()),
            ("log_pitch", self.log_pitch.len()),
            ("energy", self.energy.len()),
            ("voiced", self.voiced.len()),
        ] {
            if len != n {
                return Err(record(field, format!("{len} entries for {n} phonemes")));
            }
        }
        if let Some(i) = self.durations.iter().position(|&d| d == 0) {
            return Err(record("durations", format!("phoneme {i} has zero duration")));
        }
        let total: usize = self.durations.iter().sum();
        if total != self.mel.nrows() {
            return Err(record("durations", format!("durations sum to {total} but mel has {} frames", self.mel.nrows())));
        }
        if !self.log_pitch.iter().all(|v| v.is_finite()) {
            return Err(record("log_pitch", "non-finite value".into()));
        }
        if !self.energy.iter().all(|v| v.is_finite()) {
            return Err(record("energy", "non-finite value".into()));
        }
        if !self.mel.iter().all(|v| v.is_finite()) {
            return Err(record("mel", "non-finite value".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.mel.nrows()
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> DubbingSample<U> {
        let to = |v: &T| U::lit(v.as_f64());
        DubbingSample {
            id: self.id.clone(),
            phonemes: self.phonemes.clone(),
            durations: self.durations.clone(),
            log_pitch: self.log_pitch.map(to),
            energy: self.energy.map(to),
            voiced: self.voiced.clone(),
            mel: self.mel.map(to),
            lip: self.lip.as_ref().map(FeatureSequence::cast),
            face: self.face.as_ref().map(FeatureSequence::cast),
            context_pre: self.context_pre.as_ref().map(ContextSentence::cast),
            context_fol: self.context_fol.as_ref().map(ContextSentence::cast),
            transcript: self.transcript.clone(),
        }
    }

    /// Same sample with both neighbouring sentences removed.
    pub fn without_context(&self) -> Self {
        DubbingSample { context_pre: None, context_fol: None, ..self.clone() }
    }
}
