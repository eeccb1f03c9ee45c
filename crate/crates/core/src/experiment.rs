//! Training runs on a corpus and paired-seed ablation studies.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, TemplateTranscriber};
use crate::scalar::Scalar;
use crate::synthesis::{Ablations, DubbingSample, ModelConfig};
use crate::train::{StepRecord, Trainer};

pub const METRICS_LOG: &str = "metrics.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<StepRecord>,
    /// Step and mean validation pitch MSE of the best checkpoint.
    pub best_step: Option<u64>,
    pub best_valid_pitch_mse: Option<f64>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Model config with corpus-derived input sizes and statistics.
pub fn model_for_corpus(cfg: &RunConfig, corpus: &Corpus) -> ModelConfig {
    let mut model = cfg.model.clone();
    model.adapt_to_corpus(&corpus.info);
    model
}

/// Trains for `cfg.train.steps` total steps, appending to the step-metrics
/// log, evaluating on the validation split every `eval_every` steps and
/// writing `last.ckpt`, `best.ckpt` and a JSON summary to `out_dir`.
pub fn run_training<T: Scalar>(cfg: &RunConfig, corpus: &Corpus, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train: Vec<DubbingSample<T>> = corpus.load_split(Split::Train)?;
    let mut valid: Vec<DubbingSample<T>> = corpus.load_split(Split::Valid)?;
    if let Some(n) = cfg.train.max_eval_samples {
        valid.truncate(n);
    }
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::<T>::load(path)?;
            log::info!("resumed from {} at step {}", path.display(), t.step_count());
            t
        }
        None => Trainer::new(model_for_corpus(cfg, corpus), cfg.optim.clone(), cfg.train.ablations.clone(), cfg.train.seed)?,
    };
    let log_path = out_dir.join(METRICS_LOG);
    if resume.is_none() || !log_path.exists() {
        fs::write(&log_path, format!("{}\n", StepRecord::HEADER)).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut summary = TrainSummary {
        steps: trainer.step_count(),
        last: None,
        best_step: None,
        best_valid_pitch_mse: None,
        last_checkpoint: out_dir.join(LAST_CHECKPOINT),
        best_checkpoint: None,
    };
    let consider = |trainer: &Trainer<T>, summary: &mut TrainSummary| -> Result<()> {
        if valid.is_empty() {
            return Ok(());
        }
        let report = trainer.evaluate("valid", &valid, None)?;
        let mse = report.mean_pitch_mse().unwrap_or(f64::INFINITY);
        log::info!("step {}: validation pitch MSE {mse:.5}, mel L1 {:.4}", trainer.step_count(), report.mean_mel_l1().unwrap_or(f64::NAN));
        if summary.best_valid_pitch_mse.is_none_or(|b| mse < b) {
            let path = out_dir.join(BEST_CHECKPOINT);
            trainer.save(&path)?;
            summary.best_step = Some(trainer.step_count());
            summary.best_valid_pitch_mse = Some(mse);
            summary.best_checkpoint = Some(path);
        }
        Ok(())
    };
    let mut pending = String::new();
    while trainer.step_count() < cfg.train.steps {
        let record = trainer.step(&train)?;
        let _ = writeln!(pending, "{}", record.to_line());
        let l = &record.loss;
        if cfg.train.log_every > 0 && record.step % cfg.train.log_every == 0 {
            append(&log_path, &std::mem::take(&mut pending))?;
            log::info!("step {}: loss {:.4} (mel {:.4}, pitch {:.5}, energy {:.5}) lr {:.2e}", record.step, l.total, l.mel, l.pitch, l.energy, record.lr);
        }
        summary.last = Some(record);
        if cfg.train.eval_every > 0 && record.step % cfg.train.eval_every == 0 {
            consider(&trainer, &mut summary)?;
        }
    }
    append(&log_path, &pending)?;
    if cfg.train.eval_every == 0 || trainer.step_count() % cfg.train.eval_every != 0 {
        consider(&trainer, &mut summary)?;
    }
    trainer.save(&summary.last_checkpoint)?;
    summary.steps = trainer.step_count();
    let path = out_dir.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// One ablation variant across paired seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablations: Ablations,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        self.ablations.label()
    }

    /// Mean held-out pitch MSE of each seed.
    pub fn pitch_mse(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.mean_pitch_mse().unwrap_or(f64::NAN)).collect()
    }

    fn average(&self, f: impl Fn(&EvalReport) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.reports.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Full model first, then each ablation, all trained on the same seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn full(&self) -> &AblationRow {
        &self.rows[0]
    }

    /// Seeds where `row` has strictly lower pitch MSE than the full model.
    pub fn better_than_full(&self, row: &AblationRow) -> usize {
        self.full().pitch_mse().iter().zip(row.pitch_mse()).filter(|(f, r)| r < *f).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>, d: usize| v.map_or_else(|| "undef".into(), |x| format!("{x:.d$}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<36} {:>8} {:>8} {:>8} {:>10} {:>8} {:>12}", "model", "gpe%", "ffe%", "wer", "pitch_mse", "mel_l1", "beats_full");
        for (i, row) in self.rows.iter().enumerate() {
            let wins = if i == 0 { "-".to_string() } else { format!("{}/{}", self.better_than_full(row), row.seeds.len()) };
            let _ = writeln!(
                out,
                "{:<36} {:>8} {:>8} {:>8} {:>10} {:>8} {:>12}",
                row.label(),
                cell(row.average(EvalReport::mean_gpe), 2),
                cell(row.average(EvalReport::mean_ffe), 2),
                cell(row.average(EvalReport::mean_wer), 3),
                cell(row.average(EvalReport::mean_pitch_mse), 5),
                cell(row.average(EvalReport::mean_mel_l1), 4),
                wins
            );
        }
        out
    }
}

/// Trains the full model and each variant for `steps` steps on every seed
/// and scores them on `test`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<T: Scalar>(
    model: &ModelConfig,
    optim: &crate::optim::OptimConfig,
    steps: u64,
    train: &[DubbingSample<T>],
    test: &[DubbingSample<T>],
    variants: &[Ablations],
    seeds: &[u64],
    transcriber: Option<&TemplateTranscriber>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len() + 1);
    for ablations in std::iter::once(Ablations::none()).chain(variants.iter().cloned()) {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut trainer = Trainer::<T>::new(model.clone(), optim.clone(), ablations.clone(), seed)?;
            for _ in 0..steps {
                trainer.step(train)?;
            }
            let report = trainer.evaluate(&ablations.label(), test, transcriber)?;
            log::info!("{} seed {seed}: pitch MSE {:.5}", ablations.label(), report.mean_pitch_mse().unwrap_or(f64::NAN));
            reports.push(report);
        }
        rows.push(AblationRow { ablations, seeds: seeds.to_vec(), reports });
    }
    Ok(AblationTable { rows })
}
