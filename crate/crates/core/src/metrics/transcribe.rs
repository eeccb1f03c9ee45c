use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::corpus::phoneme_symbol;
use crate::error::{Error, Result};

use super::Transcript;

/// Stand-in recognizer for mel spectrograms: labels each phoneme span with
/// the nearest per-phoneme spectral template, then regroups the labels into
/// words of known phoneme counts.
///
/// Spans are compared after removing their mean level, so an energy offset
/// alone does not change the decision.
#[derive(Clone, Debug)]
pub struct TemplateTranscriber {
    /// `(vocab, mel_bins)`, mean-removed per row.
    templates: Array2<f64>,
}

fn centred(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let mean = v.mean().unwrap_or(0.0);
    v.mapv(|x| x - mean)
}

impl TemplateTranscriber {
    pub fn new(templates: &Array2<f64>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::invalid("template transcriber", "no templates"));
        }
        let mut t = templates.clone();
        for mut row in t.rows_mut() {
            let c = centred(row.view());
            row.assign(&c);
        }
        Ok(TemplateTranscriber { templates: t })
    }

    /// Phoneme id closest to `frame`.
    pub fn classify(&self, frame: ArrayView1<'_, f64>) -> usize {
        let f = centred(frame);
        let mut best = (0, f64::INFINITY);
        for (i, t) in self.templates.rows().into_iter().enumerate() {
            let d: f64 = t.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// One phoneme id per duration span of `mel`.
    pub fn phonemes(&self, mel: &Array2<f64>, durations: &[usize]) -> Result<Vec<usize>> {
        if mel.ncols() != self.templates.ncols() {
            return Err(Error::Shape { context: "template transcriber", axis: "mel_bins", expected: self.templates.ncols(), got: mel.ncols() });
        }
        let frames: usize = durations.iter().sum();
        if frames != mel.nrows() {
            return Err(Error::Shape { context: "template transcriber", axis: "frames", expected: frames, got: mel.nrows() });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(durations.len());
        for &d in durations {
            // average away from the span edges, where neighbours bleed in
            let (lo, hi) = if d > 2 { (start + 1, start + d - 1) } else { (start, start + d) };
            let span = mel.slice(ndarray::s![lo..hi, ..]);
            let mean = span.mean_axis(Axis(0)).ok_or_else(|| Error::invalid("template transcriber", "empty span"))?;
            out.push(self.classify(mean.view()));
            start += d;
        }
        Ok(out)
    }

    /// Transcript of `mel`, grouping the decoded phonemes into words of
    /// `word_lengths` phonemes each.
    pub fn transcribe(&self, mel: &Array2<f64>, durations: &[usize], word_lengths: &[usize]) -> Result<Transcript> {
        let ids = self.phonemes(mel, durations)?;
        let total: usize = word_lengths.iter().sum();
        if total != ids.len() {
            return Err(Error::Shape { context: "template transcriber", axis: "phonemes", expected: ids.len(), got: total });
        }
        let mut words = Vec::with_capacity(word_lengths.len());
        let mut at = 0;
        for &n in word_lengths {
            words.push(ids[at..at + n].iter().map(|&p| phoneme_symbol(p)).collect::<Vec<_>>().join("-"));
            at += n;
        }
        Ok(Transcript::from_words(words))
    }
}

/// Phonemes per word of a hyphen-joined transcript such as `["b-aa", "t"]`.
pub fn word_lengths<S: AsRef<str>>(words: &[S]) -> Vec<usize> {
    words.iter().map(|w| w.as_ref().split('-').count()).collect()
}
