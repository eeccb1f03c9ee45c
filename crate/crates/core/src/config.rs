//! Run configuration, read from TOML with `[model]`, `[optim]`, `[corpus]`
//! and `[train]` tables. Every field has a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, CorpusInfo};
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::synthesis::{Ablations, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub log_every: u64,
    /// Validation and best-checkpoint interval; 0 evaluates only at the end.
    pub eval_every: u64,
    pub ablations: Ablations,
    /// Corpus root; falls back to `M2CI_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Caps the validation samples scored during training.
    pub max_eval_samples: Option<usize>,
    /// Paired seeds per ablation in `ablate`.
    pub paired_seeds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 5000,
            log_every: 50,
            eval_every: 500,
            ablations: Ablations::none(),
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            precision: Precision::F32,
            max_eval_samples: None,
            paired_seeds: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
}

/// 1-based line of byte `offset` in `text`.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!("line {}: ", line_of(text, s.start))).unwrap_or_default();
            Error::Config(format!("{at}{}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.corpus.validate()?;
        if self.train.paired_seeds == 0 {
            return Err(Error::Config("train.paired_seeds must be positive".into()));
        }
        Ok(())
    }

    /// Corpus root from the config, else `M2CI_DATA_DIR`.
    pub fn data_dir(&self) -> Option<PathBuf> {
        self.train.data_dir.clone().or_else(|| std::env::var_os("M2CI_DATA_DIR").map(PathBuf::from))
    }
}

impl ModelConfig {
    /// Takes stream widths, vocabulary, mel bins and training-split prosody
    /// statistics from a corpus.
    pub fn adapt_to_corpus(&mut self, info: &CorpusInfo) {
        let c = &info.config;
        let before = self.clone();
        self.vocab = c.vocab;
        self.mel_bins = c.mel_bins;
        self.video_dim = c.video_dim;
        self.audio_dim = c.audio_dim;
        self.text_dim = c.text_dim;
        self.lip_dim = c.lip_dim;
        self.face_dim = c.face_dim;
        self.pitch = info.pitch;
        self.energy = info.energy;
        if (before.vocab, before.mel_bins, before.video_dim, before.audio_dim, before.text_dim)
            != (self.vocab, self.mel_bins, self.video_dim, self.audio_dim, self.text_dim)
        {
            log::info!("model input sizes taken from the corpus");
        }
    }
}
