//! Mini-batch training, evaluation and checkpointing of a [`DubbingModel`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::extraction::FrontEnds;
use crate::metrics::{score_sample, EvalReport, TemplateTranscriber};
use crate::optim::{Adam, OptimConfig};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::synthesis::{Ablations, DubbingModel, DubbingSample, ForwardOptions, LossBreakdown, ModelConfig, Predictions};
use crate::tape::Graph;

/// Weight of the newest batch in normalization running statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(stream)) ^ index)
}

/// Sample indices of 0-based `step`: consecutive slices of per-epoch
/// shuffles, so the order depends only on `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, samples: usize, batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = step * batch as u64;
    let n = samples as u64;
    let mut epoch = u64::MAX;
    let mut order: Vec<usize> = Vec::new();
    while out.len() < batch {
        let e = pos / n;
        if e != epoch {
            epoch = e;
            order = (0..samples).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, e)));
        }
        out.push(order[(pos % n) as usize]);
        pos += 1;
    }
    out
}

/// One optimizer step as logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: u64,
    /// Batch-mean losses before the update.
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    pub const HEADER: &'static str = "step\ttotal\tmel\tpitch\tenergy\tlr\tgrad_norm";

    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!("{}\t{}\t{}\t{}\t{}\t{}\t{}", self.step, l.total, l.mel, l.pitch, l.energy, self.lr, self.grad_norm)
    }
}

/// Model, parameters and optimizer state.
pub struct Trainer<T: Scalar> {
    pub model: DubbingModel,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub front_ends: FrontEnds<T>,
    pub ablations: Ablations,
    pub seed: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelConfig, optim: OptimConfig, ablations: Ablations, seed: u64) -> Result<Self> {
        optim.validate()?;
        let mut store = ParamStore::new(derive_seed(seed, 0, 0));
        let model = DubbingModel::new(&mut store, model)?;
        let adam = Adam::new(optim, &store);
        let front_ends = model.front_ends();
        Ok(Trainer { model, store, adam, front_ends, ablations, seed })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Batch-mean losses and gradients without touching any state.
    pub fn batch_gradients(&self, batch: &[&DubbingSample<T>], step: u64) -> Result<(LossBreakdown, Gradients<T>, Vec<crate::tape::NormStatUpdate<T>>)> {
        let opts = ForwardOptions::training(self.ablations.clone());
        let mut grads = Gradients::empty(self.store.len());
        let mut total = LossBreakdown::default();
        let mut stats = Vec::new();
        for (i, sample) in batch.iter().enumerate() {
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 2 + step, i as u64));
            let mut g = Graph::training(&self.store, rng);
            let (_, loss) = self.model.loss(&mut g, sample, &self.front_ends, &opts)?;
            let values = loss.values(&g);
            if !values.total.is_finite() {
                return Err(Error::NonFinite(format!("loss of sample {} at step {}", sample.id, step + 1)));
            }
            total.total += values.total;
            total.mel += values.mel;
            total.pitch += values.pitch;
            total.energy += values.energy;
            grads.merge(g.backward(loss.total)?.params());
            stats.extend(g.take_stat_updates());
        }
        let b = batch.len() as f64;
        grads.scale(T::lit(1.0 / b));
        let loss = LossBreakdown { total: total.total / b, mel: total.mel / b, pitch: total.pitch / b, energy: total.energy / b };
        Ok((loss, grads, stats))
    }

    /// One update on `batch`.
    pub fn step_on(&mut self, batch: &[&DubbingSample<T>]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::invalid("training step", "empty batch"));
        }
        let step = self.adam.step;
        let (loss, grads, stats) = self.batch_gradients(batch, step)?;
        let info = self.adam.update(&mut self.store, &grads)?;
        let (keep, m) = (T::lit(1.0 - NORM_MOMENTUM), T::lit(NORM_MOMENTUM));
        for u in stats {
            let mean = self.store.get_mut(u.mean_id);
            mean.row_mut(0).zip_mut_with(&u.batch_mean, |r, &b| *r = keep * *r + m * b);
            let var = self.store.get_mut(u.var_id);
            var.row_mut(0).zip_mut_with(&u.batch_var, |r, &b| *r = keep * *r + m * b);
        }
        Ok(StepRecord { step: self.adam.step, loss, lr: info.lr, grad_norm: info.grad_norm })
    }

    /// One update on the batch scheduled for the next step.
    pub fn step(&mut self, data: &[DubbingSample<T>]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::invalid("training step", "no training samples"));
        }
        let idx = batch_indices(self.seed, self.adam.step, data.len(), self.adam.config.batch_size);
        let batch: Vec<&DubbingSample<T>> = idx.iter().map(|&i| &data[i]).collect();
        self.step_on(&batch)
    }

    /// Evaluation-mode prediction with predicted prosody fed to the decoder.
    pub fn predict(&self, sample: &DubbingSample<T>) -> Result<Predictions<T>> {
        let mut g = Graph::new(&self.store);
        let out = self.model.forward(&mut g, sample, &self.front_ends, &ForwardOptions::inference(self.ablations.clone()))?;
        Ok(out.materialize(&g))
    }

    /// Evaluation-mode losses, teacher forcing off.
    pub fn eval_loss(&self, sample: &DubbingSample<T>) -> Result<LossBreakdown> {
        let mut g = Graph::new(&self.store);
        let (_, loss) = self.model.loss(&mut g, sample, &self.front_ends, &ForwardOptions::inference(self.ablations.clone()))?;
        Ok(loss.values(&g))
    }

    pub fn evaluate(&self, label: &str, samples: &[DubbingSample<T>], transcriber: Option<&TemplateTranscriber>) -> Result<EvalReport> {
        let scores = samples
            .iter()
            .map(|s| score_sample(s, &self.predict(s)?, transcriber))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::new(label, scores))
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(&self.model.config, &self.ablations, self.seed, &self.store, &self.adam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuilds the trainer a checkpoint was captured from.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let h = &ckpt.header;
        let mut t = Trainer::new(h.model.clone(), h.optim.clone(), h.ablations.clone(), h.seed)?;
        ckpt.restore(&mut t.store, &mut t.adam)?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_triples, CorpusConfig};
    use crate::optim::Schedule;

    fn tiny_setup() -> (ModelConfig, Vec<DubbingSample<f64>>) {
        let corpus = CorpusConfig {
            num_triples: 4,
            vocab: 6,
            mel_bins: 4,
            video_dim: 5,
            audio_dim: 5,
            text_dim: 5,
            lip_dim: 5,
            face_dim: 5,
            min_phonemes: 8,
            max_phonemes: 9,
            min_duration: 2,
            max_duration: 3,
            ..CorpusConfig::default()
        };
        let (triples, _) = generate_triples(&corpus).unwrap();
        let samples = triples.iter().map(|t| t.to_sample().unwrap()).collect();
        let model = ModelConfig { dropout: 0.1, ..ModelConfig::miniature() };
        (model, samples)
    }

    fn optim() -> OptimConfig {
        OptimConfig { batch_size: 2, schedule: Schedule::Constant, lr: 1e-3, ..OptimConfig::default() }
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, 10, 2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, 10, 4), batch_indices(3, 7, 10, 4));
        assert_ne!(batch_indices(3, 0, 10, 10), batch_indices(4, 0, 10, 10));
    }

    #[test]
    fn fixed_seed_gives_identical_first_losses() {
        let (model, data) = tiny_setup();
        let run = || {
            let mut t = Trainer::<f64>::new(model.clone(), optim(), Ablations::none(), 5).unwrap();
            let a = t.step(&data).unwrap();
            let b = t.step(&data).unwrap();
            (a.loss.total.to_bits(), b.loss.total.to_bits())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_resume_continues_exactly() {
        let (model, data) = tiny_setup();
        let mut straight = Trainer::<f64>::new(model.clone(), optim(), Ablations::none(), 9).unwrap();
        let mut resumed = Trainer::<f64>::new(model, optim(), Ablations::none(), 9).unwrap();
        for _ in 0..3 {
            straight.step(&data).unwrap();
            resumed.step(&data).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.m2ci");
        resumed.save(&path).unwrap();
        let mut resumed = Trainer::<f64>::load(&path).unwrap();
        assert_eq!(resumed.step_count(), 3);
        for _ in 0..3 {
            let a = straight.step(&data).unwrap();
            let b = resumed.step(&data).unwrap();
            assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
            assert_eq!(a.step, b.step);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let (model, data) = tiny_setup();
        let data: Vec<DubbingSample<f32>> = data.iter().map(|s| s.cast()).collect();
        let mut t = Trainer::<f32>::new(model, optim(), Ablations::parse_list("pre").unwrap(), 1).unwrap();
        t.step(&data).unwrap();
        let ckpt = t.checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        assert!(bytes.starts_with(crate::checkpoint::CHECKPOINT_MAGIC));
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, ckpt.header);
        assert!(back.values.iter().zip(&ckpt.values).all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())));
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    }

    #[test]
    fn training_reduces_loss_on_a_small_batch() {
        let (model, data) = tiny_setup();
        let cfg = OptimConfig { batch_size: 4, schedule: Schedule::Constant, lr: 3e-3, ..OptimConfig::default() };
        let model = ModelConfig { dropout: 0.0, ..model };
        let mut t = Trainer::<f64>::new(model, cfg, Ablations::none(), 0).unwrap();
        let first = t.step(&data).unwrap().loss.total;
        let mut last = first;
        for _ in 0..60 {
            last = t.step(&data).unwrap().loss.total;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
