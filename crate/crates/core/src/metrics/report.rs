use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthesis::{DubbingSample, Predictions};

use super::transcribe::{word_lengths, TemplateTranscriber};
use super::{ffe, gpe, wer, PitchTrack, Transcript};

/// Scores of one synthesized sample against its targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    /// `None` when no frame is voiced in both tracks.
    pub gpe: Option<f64>,
    pub ffe: f64,
    pub wer: Option<f64>,
    /// Per-phoneme log-pitch MSE.
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub mel_l1: f64,
}

/// Scores predicted prosody and mel against a sample's targets. Both pitch
/// tracks use the target voicing, since the model predicts no voicing.
/// WER needs a transcriber and is skipped without one.
pub fn score_sample<T: Scalar>(
    sample: &DubbingSample<T>,
    predicted: &Predictions<T>,
    transcriber: Option<&TemplateTranscriber>,
) -> Result<SampleScores> {
    let n = sample.len();
    if predicted.log_pitch.len() != n || predicted.energy.len() != n {
        return Err(Error::Shape { context: "score_sample", axis: "phonemes", expected: n, got: predicted.log_pitch.len() });
    }
    if predicted.mel.dim() != sample.mel.dim() {
        return Err(Error::Shape { context: "score_sample", axis: "mel frames", expected: sample.mel.nrows(), got: predicted.mel.nrows() });
    }
    let target: Vec<f64> = sample.log_pitch.iter().map(|v| v.as_f64()).collect();
    let guess: Vec<f64> = predicted.log_pitch.iter().map(|v| v.as_f64()).collect();
    let reference = PitchTrack::from_phonemes(&target, &sample.voiced, &sample.durations)?;
    let synthesized = PitchTrack::from_phonemes(&guess, &sample.voiced, &sample.durations)?;
    let mse = |a: &ndarray::Array1<T>, b: &ndarray::Array1<T>| {
        a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / n as f64
    };
    let mel_l1 = sample.mel.iter().zip(&predicted.mel).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>()
        / sample.mel.len() as f64;
    let wer = match transcriber {
        Some(t) if !sample.transcript.is_empty() => {
            let mel = predicted.mel.mapv(|v| v.as_f64());
            let hyp = t.transcribe(&mel, &sample.durations, &word_lengths(&sample.transcript))?;
            Some(wer(&Transcript::from_words(&sample.transcript), &hyp)?)
        }
        _ => None,
    };
    Ok(SampleScores {
        id: sample.id.clone(),
        gpe: gpe(&reference, &synthesized),
        ffe: ffe(&reference, &synthesized),
        wer,
        pitch_mse: mse(&sample.log_pitch, &predicted.log_pitch),
        energy_mse: mse(&sample.energy, &predicted.energy),
        mel_l1,
    })
}

/// Report column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Gpe,
    Ffe,
    Wer,
    PitchMse,
    EnergyMse,
    MelL1,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Gpe, Metric::Ffe, Metric::Wer, Metric::PitchMse, Metric::EnergyMse, Metric::MelL1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Gpe => "gpe",
            Metric::Ffe => "ffe",
            Metric::Wer => "wer",
            Metric::PitchMse => "pitch_mse",
            Metric::EnergyMse => "energy_mse",
            Metric::MelL1 => "mel_l1",
        }
    }

    fn header(self) -> &'static str {
        match self {
            Metric::Gpe => "gpe%",
            Metric::Ffe => "ffe%",
            other => other.name(),
        }
    }

    fn digits(self) -> usize {
        match self {
            Metric::Gpe | Metric::Ffe => 2,
            Metric::Wer => 3,
            Metric::MelL1 => 4,
            Metric::PitchMse | Metric::EnergyMse => 5,
        }
    }

    pub fn of(self, s: &SampleScores) -> Option<f64> {
        match self {
            Metric::Gpe => s.gpe,
            Metric::Ffe => Some(s.ffe),
            Metric::Wer => s.wer,
            Metric::PitchMse => Some(s.pitch_mse),
            Metric::EnergyMse => Some(s.energy_mse),
            Metric::MelL1 => Some(s.mel_l1),
        }
    }

    /// Parses a comma-separated list such as `gpe,ffe`.
    pub fn parse_list(list: &str) -> Result<Vec<Metric>> {
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown metric {s:?}; valid metrics: {}", valid.join(", ")))
        })
    }
}

/// Per-sample scores and their means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub samples: Vec<SampleScores>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn new(label: impl Into<String>, samples: Vec<SampleScores>) -> Self {
        EvalReport { label: label.into(), samples }
    }

    /// Mean GPE over samples where it is defined.
    pub fn mean_gpe(&self) -> Option<f64> {
        mean(self.samples.iter().filter_map(|s| s.gpe))
    }

    pub fn mean_ffe(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.ffe))
    }

    pub fn mean_wer(&self) -> Option<f64> {
        mean(self.samples.iter().filter_map(|s| s.wer))
    }

    pub fn mean_pitch_mse(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.pitch_mse))
    }

    pub fn mean_energy_mse(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.energy_mse))
    }

    pub fn mean_mel_l1(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.mel_l1))
    }

    /// Mean of `metric` over samples where it is defined.
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        mean(self.samples.iter().filter_map(|s| metric.of(s)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Fixed-width text table with every metric.
    pub fn to_table(&self) -> String {
        self.to_table_with(&Metric::ALL)
    }

    /// Fixed-width text table, one row per sample and a closing mean row.
    /// Undefined values print as `undef`.
    pub fn to_table_with(&self, metrics: &[Metric]) -> String {
        let cell = |v: Option<f64>, digits: usize| v.map_or_else(|| "undef".to_string(), |x| format!("{x:.digits$}"));
        let mut out = String::new();
        if !self.label.is_empty() {
            let _ = writeln!(out, "# {}", self.label);
        }
        let mut row = |first: &str, cells: Vec<String>| {
            let _ = write!(out, "{first:<12}");
            for c in cells {
                let _ = write!(out, " {c:>10}");
            }
            out.push('\n');
        };
        row("sample", metrics.iter().map(|m| m.header().to_string()).collect());
        for s in &self.samples {
            row(&s.id, metrics.iter().map(|m| cell(m.of(s), m.digits())).collect());
        }
        row("mean", metrics.iter().map(|&m| cell(self.mean(m), m.digits())).collect());
        out
    }
}

/// Writes `step<TAB>value` lines under a `step<TAB>name` header.
pub fn write_plot_data(path: &Path, name: &str, points: &[(u64, f64)]) -> Result<()> {
    let mut text = format!("step\t{name}\n");
    for (step, value) in points {
        let _ = writeln!(text, "{step}\t{value}");
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
