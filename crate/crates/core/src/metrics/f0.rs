use crate::error::{Error, Result};

use super::PitchTrack;

pub const SAMPLE_RATE: u32 = 16_000;
/// 40 ms analysis window at 16 kHz.
pub const WINDOW: usize = 640;
/// 10 ms hop at 16 kHz.
pub const HOP: usize = 160;
pub const F0_MIN: f64 = 50.0;
pub const F0_MAX: f64 = 600.0;
pub const VOICING_THRESHOLD: f64 = 0.3;
/// Frames whose RMS falls below this are silent.
pub const SILENCE_RMS: f64 = 1e-4;

/// Normalized autocorrelation of `x` at `lag`.
fn nacf(x: &[f64], lag: usize) -> f64 {
    let n = x.len() - lag;
    let (a, b) = (&x[..n], &x[lag..]);
    let cross: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let ea: f64 = a.iter().map(|v| v * v).sum();
    let eb: f64 = b.iter().map(|v| v * v).sum();
    if ea <= 0.0 || eb <= 0.0 {
        return 0.0;
    }
    cross / (ea * eb).sqrt()
}

/// Period lag of one frame, or `None` if unvoiced.
fn frame_lag(frame: &[f64], min_lag: usize, max_lag: usize) -> Option<f64> {
    let rms = (frame.iter().map(|v| v * v).sum::<f64>() / frame.len() as f64).sqrt();
    if rms < SILENCE_RMS {
        return None;
    }
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1).map(|lag| nacf(frame, lag)).collect();
    let at = |lag: usize| r[lag + 1 - min_lag];
    let peaks: Vec<usize> = (min_lag..=max_lag).filter(|&l| at(l) >= at(l - 1) && at(l) >= at(l + 1)).collect();
    let best = peaks.iter().map(|&l| at(l)).fold(f64::NEG_INFINITY, f64::max);
    if !(best >= VOICING_THRESHOLD) {
        return None;
    }
    // first peak close to the best one, so multiples of the period lose
    let lag = *peaks.iter().find(|&&l| at(l) >= 0.9 * best)?;
    let (y0, y1, y2) = (at(lag - 1), at(lag), at(lag + 1));
    let denom = y0 - 2.0 * y1 + y2;
    let shift = if denom.abs() > 1e-12 { (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    Some(lag as f64 + shift)
}

/// Frame-wise autocorrelation pitch tracker over 40 ms windows with a 10 ms
/// hop. Frame `k` covers samples `[160k, 160k + 640)`.
pub fn estimate_f0(signal: &[f64], sample_rate: u32) -> Result<PitchTrack> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::invalid("estimate_f0", format!("sample rate {sample_rate} Hz unsupported; expected {SAMPLE_RATE}")));
    }
    if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("signal sample {i}")));
    }
    let sr = sample_rate as f64;
    let min_lag = (sr / F0_MAX).ceil() as usize;
    let max_lag = (sr / F0_MIN).floor() as usize;
    let frames = if signal.len() < WINDOW { 0 } else { (signal.len() - WINDOW) / HOP + 1 };
    let f0 = (0..frames)
        .map(|k| {
            let frame = &signal[k * HOP..k * HOP + WINDOW];
            frame_lag(frame, min_lag, max_lag).map_or(0.0, |lag| (sr / lag).clamp(F0_MIN, F0_MAX))
        })
        .collect();
    PitchTrack::from_f0(f0)
}
