use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extraction::ContextSentence;
use crate::nncore::FeatureSequence;
use crate::scalar::Scalar;
use crate::synthesis::{DubbingSample, VarianceStats};

use super::generate::{generate_triples, CorpusConfig, GeneratedSentence, GeneratorTables, Split, Triple};
use super::tensor::{header_len, read_matrix, write_tensor, MAGIC};

pub const MANIFEST_FILE: &str = "manifest";
pub const INFO_FILE: &str = "corpus.json";
pub const TEMPLATES_FILE: &str = "phoneme_templates.m2ci";

/// One sentence of a manifest record. Tensor paths are relative to the
/// corpus root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub log_pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub voiced: Vec<bool>,
    pub transcript: String,
    /// Hidden prosody state the sentence was generated from.
    pub prosody_state: f64,
    pub tensors: BTreeMap<String, String>,
}

impl SentenceRecord {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn words(&self) -> Vec<String> {
        self.transcript.split_whitespace().map(str::to_string).collect()
    }

    pub fn mean_log_pitch(&self) -> f64 {
        self.log_pitch.iter().sum::<f64>() / self.log_pitch.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub current: SentenceRecord,
    pub previous: SentenceRecord,
    pub following: SentenceRecord,
}

/// Sample records, one JSON object per line on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(line).map_err(|e| Error::Record {
                id: format!("line {}", i + 1),
                field: "json",
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Ok(Manifest { records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Corpus-level metadata written next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub config: CorpusConfig,
    /// Log-pitch statistics of the training split.
    pub pitch: VarianceStats,
    /// Energy statistics of the training split.
    pub energy: VarianceStats,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

fn stats(triples: &[Triple]) -> Result<(VarianceStats, VarianceStats)> {
    let train: Vec<&Triple> = triples.iter().filter(|t| t.split == Split::Train).collect();
    let pool: Vec<&Triple> = if train.is_empty() { triples.iter().collect() } else { train };
    let pitch = VarianceStats::from_values(pool.iter().flat_map(|t| t.current.log_pitch.iter().copied()))?;
    let energy = VarianceStats::from_values(pool.iter().flat_map(|t| t.current.energy.iter().copied()))?;
    Ok((pitch, energy))
}

fn record_for(root: &Path, sample_id: &str, role: &str, s: &GeneratedSentence, fields: &[(&str, &Array2<f64>)]) -> Result<SentenceRecord> {
    let mut tensors = BTreeMap::new();
    for (field, data) in fields {
        let rel = format!("tensors/{sample_id}/{role}.{field}.m2ci");
        let as_f32 = data.mapv(|v| v as f32);
        write_tensor(&root.join(&rel), &as_f32.view().into_dyn())?;
        tensors.insert(field.to_string(), rel);
    }
    Ok(SentenceRecord {
        id: s.id.clone(),
        phonemes: s.phonemes.clone(),
        durations: s.durations.clone(),
        log_pitch: s.log_pitch.clone(),
        energy: s.energy.clone(),
        voiced: s.voiced.clone(),
        transcript: s.transcript(),
        prosody_state: s.state,
        tensors,
    })
}

/// Writes triples, templates and metadata under `out_dir`.
pub fn write_corpus(cfg: &CorpusConfig, triples: &[Triple], tables: &GeneratorTables, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(triples.len());
    for t in triples {
        let c = &t.current;
        let current = record_for(out_dir, &t.id, "current", c, &[("mel", &c.mel), ("lip", &c.lip), ("face", &c.face)])?;
        let context = |s: &GeneratedSentence, role: &str| {
            record_for(out_dir, &t.id, role, s, &[("video", &s.video), ("audio", &s.audio), ("text", &s.text)])
        };
        records.push(SampleRecord {
            id: t.id.clone(),
            split: t.split,
            previous: context(&t.previous, "previous")?,
            following: context(&t.following, "following")?,
            current,
        });
    }
    let manifest = Manifest { records };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()?).map_err(|e| Error::io(&path, e))?;

    let templates = tables.envelope.mapv(|v| v as f32);
    write_tensor(&out_dir.join(TEMPLATES_FILE), &templates.view().into_dyn())?;

    let (pitch, energy) = stats(triples)?;
    let (train, valid, test) = cfg.split_sizes();
    let info = CorpusInfo { config: cfg.clone(), pitch, energy, train, valid, test };
    let path = out_dir.join(INFO_FILE);
    fs::write(&path, serde_json::to_string_pretty(&info)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates a corpus and writes it to `out_dir`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    let (triples, tables) = generate_triples(cfg)?;
    write_corpus(cfg, &triples, &tables, out_dir)
}

/// Reads the `(rows, cols)` of a rank-2 tensor file from its header.
fn matrix_dims(path: &Path) -> Result<(usize, usize)> {
    let mut head = [0u8; 14];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut head).map_err(|_| Error::Format { offset: 0, message: format!("{} shorter than a matrix header", path.display()) })?;
    if &head[..4] != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic in {}", path.display()) });
    }
    if head[5] != 2 {
        return Err(Error::Format { offset: 5, message: format!("{} has rank {}, expected 2", path.display(), head[5]) });
    }
    debug_assert_eq!(header_len(2), 14);
    let dim = |at: usize| u32::from_le_bytes(head[at..at + 4].try_into().expect("4 bytes")) as usize;
    Ok((dim(6), dim(10)))
}

fn check_sentence(root: &Path, sample: &str, s: &SentenceRecord, fields: &[&'static str]) -> Result<()> {
    let record = |field: &'static str, message: String| Error::Record { id: sample.to_string(), field, message };
    let n = s.phonemes.len();
    if n == 0 {
        return Err(record("phonemes", format!("{} has no phonemes", s.id)));
    }
    for (field, len) in [("durations", s.durations.len()), ("log_pitch", s.log_pitch.len()), ("energy", s.energy.len()), ("voiced", s.voiced.len())] {
        if len != n {
            return Err(record(field, format!("{} has {len} entries for {n} phonemes", s.id)));
        }
    }
    if s.durations.contains(&0) {
        return Err(record("durations", format!("{} has a zero duration", s.id)));
    }
    if !s.log_pitch.iter().chain(&s.energy).all(|v| v.is_finite()) {
        return Err(record("log_pitch", format!("{} has non-finite prosody targets", s.id)));
    }
    for &field in fields {
        let rel = s.tensors.get(field).ok_or_else(|| record(field, format!("{} lists no {field} tensor", s.id)))?;
        let path = root.join(rel);
        if !path.is_file() {
            return Err(record(field, format!("references missing file {}", path.display())));
        }
        let (rows, _) = matrix_dims(&path).map_err(|e| record(field, e.to_string()))?;
        let frames = s.frames();
        let expected = match field {
            "mel" | "audio" => frames,
            "video" | "lip" | "face" => frames / CorpusConfig::FRAMES_PER_VIDEO_STEP,
            _ => n,
        };
        if rows != expected {
            return Err(record(
                if field == "mel" { "durations" } else { field },
                format!("{}: durations sum to {frames} frames but {field} has {rows} rows (expected {expected})", s.id),
            ));
        }
    }
    Ok(())
}

/// Parses and validates a manifest: per-phoneme arrays agree, every tensor
/// file exists and its row count matches the durations.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let (root, file) = if path.is_dir() { (path.to_path_buf(), path.join(MANIFEST_FILE)) } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    if !file.is_file() {
        return Err(Error::MissingFile(file));
    }
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest = Manifest::parse(&text)?;
    for r in &manifest.records {
        check_sentence(&root, &r.id, &r.current, &["mel", "lip", "face"])?;
        check_sentence(&root, &r.id, &r.previous, &["video", "audio", "text"])?;
        check_sentence(&root, &r.id, &r.following, &["video", "audio", "text"])?;
    }
    Ok(manifest)
}

/// A validated corpus on disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub info: CorpusInfo,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = load_manifest(root)?;
        let path = root.join(INFO_FILE);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let info: CorpusInfo = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        Ok(Corpus { root: root.to_path_buf(), manifest, info })
    }

    fn matrix<T: Scalar>(&self, s: &SentenceRecord, field: &'static str) -> Result<Array2<T>> {
        let rel = s.tensors.get(field).ok_or_else(|| Error::Record { id: s.id.clone(), field, message: "no tensor".into() })?;
        Ok(read_matrix::<f32>(&self.root.join(rel))?.mapv(|v| T::lit(v as f64)))
    }

    fn context<T: Scalar>(&self, s: &SentenceRecord) -> Result<ContextSentence<T>> {
        ContextSentence::new(
            s.id.clone(),
            FeatureSequence::new(self.matrix(s, "video")?)?,
            s.phonemes.clone(),
            FeatureSequence::new(self.matrix(s, "audio")?)?,
            Some(FeatureSequence::new(self.matrix(s, "text")?)?),
        )
    }

    pub fn load_sample<T: Scalar>(&self, r: &SampleRecord) -> Result<DubbingSample<T>> {
        let c = &r.current;
        let sample = DubbingSample {
            id: r.id.clone(),
            phonemes: c.phonemes.clone(),
            durations: c.durations.clone(),
            log_pitch: c.log_pitch.iter().map(|&v| T::lit(v)).collect(),
            energy: c.energy.iter().map(|&v| T::lit(v)).collect(),
            voiced: c.voiced.clone(),
            mel: self.matrix(c, "mel")?,
            lip: Some(FeatureSequence::new(self.matrix(c, "lip")?)?),
            face: Some(FeatureSequence::new(self.matrix(c, "face")?)?),
            context_pre: Some(self.context(&r.previous)?),
            context_fol: Some(self.context(&r.following)?),
            transcript: c.words(),
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<Vec<DubbingSample<T>>> {
        self.manifest.split(split).map(|r| self.load_sample(r)).collect()
    }

    /// `(vocab, mel_bins)` reference envelopes used by the template
    /// transcriber.
    pub fn templates(&self) -> Result<Array2<f64>> {
        Ok(read_matrix::<f32>(&self.root.join(TEMPLATES_FILE))?.mapv(f64::from))
    }
}

/// SHA-256 over the manifest, metadata, templates and every tensor file,
/// in sorted path order.
pub fn corpus_hash(root: &Path) -> Result<String> {
    let mut files = vec![PathBuf::from(MANIFEST_FILE), PathBuf::from(INFO_FILE), PathBuf::from(TEMPLATES_FILE)];
    let mut tensors = Vec::new();
    let dir = root.join("tensors");
    if dir.is_dir() {
        let mut stack = vec![dir];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
                let p = entry.map_err(|e| Error::io(&d, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    tensors.push(p.strip_prefix(root).expect("under root").to_path_buf());
                }
            }
        }
    }
    tensors.sort();
    files.extend(tensors);
    let mut hasher = Sha256::new();
    for rel in files {
        let path = root.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
