//! Objective dubbing metrics: autocorrelation F0 tracking, gross pitch
//! error, F0 frame error and word error rate.

mod f0;
mod report;
mod scores;
mod transcribe;

pub use f0::{estimate_f0, F0_MAX, F0_MIN, HOP, SAMPLE_RATE, SILENCE_RMS, VOICING_THRESHOLD, WINDOW};
pub use report::{score_sample, write_plot_data, EvalReport, Metric, SampleScores};
pub use scores::{edit_distance, ffe, gpe, wer, PitchTrack, Transcript, GROSS_ERROR};
pub use transcribe::{word_lengths, TemplateTranscriber};

#[cfg(test)]
mod tests;
