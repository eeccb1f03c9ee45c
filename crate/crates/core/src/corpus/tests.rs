use std::fs;

use super::*;
use crate::error::Error;

fn small(num_triples: usize, seed: u64) -> CorpusConfig {
    CorpusConfig { num_triples, seed, ..CorpusConfig::default() }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = small(6, 11);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(&cfg, a.path()).unwrap();
    generate_corpus(&cfg, b.path()).unwrap();
    assert_eq!(fs::read(a.path().join(MANIFEST_FILE)).unwrap(), fs::read(b.path().join(MANIFEST_FILE)).unwrap());
    assert_eq!(corpus_hash(a.path()).unwrap(), corpus_hash(b.path()).unwrap());

    let c = tempfile::tempdir().unwrap();
    generate_corpus(&small(6, 12), c.path()).unwrap();
    assert_ne!(corpus_hash(a.path()).unwrap(), corpus_hash(c.path()).unwrap());
}

#[test]
fn hundred_triples_give_hundred_complete_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig { mel_bins: 8, video_dim: 4, audio_dim: 4, text_dim: 4, lip_dim: 4, face_dim: 4, ..small(100, 3) };
    let manifest = generate_corpus(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.len(), 100);
    let loaded = load_manifest(dir.path()).unwrap();
    assert_eq!(loaded, manifest);
    for r in &loaded.records {
        assert_eq!(r.current.tensors.len(), 3);
        assert_eq!(r.previous.tensors.len(), 3);
        assert_eq!(r.following.tensors.len(), 3);
    }
    let (train, valid, test) = cfg.split_sizes();
    assert_eq!((train, valid, test), (80, 10, 10));
    assert_eq!(loaded.split(Split::Test).count(), 10);

    let corpus = Corpus::open(dir.path()).unwrap();
    let from_disk = corpus.load_sample::<f64>(&corpus.manifest.records[0]).unwrap();
    let (triples, _) = generate_triples(&cfg).unwrap();
    let in_memory = triples[0].to_sample::<f64>().unwrap();
    assert_eq!(from_disk.durations, in_memory.durations);
    assert_eq!(from_disk.transcript, in_memory.transcript);
    // tensors are stored as f32
    let err = (&from_disk.mel - &in_memory.mel).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn durations_cover_every_stream() {
    let (triples, _) = generate_triples(&small(20, 5)).unwrap();
    for t in &triples {
        for s in [&t.previous, &t.current, &t.following] {
            let frames = s.frames();
            assert_eq!(s.mel.nrows(), frames);
            assert_eq!(s.audio.nrows(), frames);
            assert_eq!(s.video.nrows(), frames / CorpusConfig::FRAMES_PER_VIDEO_STEP);
            assert_eq!(s.text.nrows(), s.phonemes.len());
            assert_eq!(s.words.join("-"), s.phonemes.iter().map(|&p| phoneme_symbol(p)).collect::<Vec<_>>().join("-"));
        }
        t.to_sample::<f32>().unwrap();
    }
}

#[test]
fn previous_state_predicts_current_pitch() {
    let (triples, _) = generate_triples(&small(500, 0)).unwrap();
    let s_pre: Vec<f64> = triples.iter().map(|t| t.previous.state).collect();
    let s_cur: Vec<f64> = triples.iter().map(|t| t.current.state).collect();
    let pitch: Vec<f64> = triples.iter().map(|t| t.current.mean_log_pitch()).collect();
    let r = pearson(&s_pre, &pitch);
    assert!(r > 0.5, "corr(s_pre, mean pitch) = {r}");
    // population value is rho; 500 samples keep the estimate within 0.1
    let r_states = pearson(&s_pre, &s_cur);
    assert!((r_states - 0.8).abs() < 0.1, "{r_states}");
}

#[test]
fn context_streams_are_informative_about_current_pitch() {
    let (triples, tables) = generate_triples(&small(500, 1)).unwrap();
    let pitch: Vec<f64> = triples.iter().map(|t| t.current.mean_log_pitch()).collect();
    for (name, enc, get) in [
        ("video", &tables.video, (|s: &GeneratedSentence| s.video.clone()) as fn(&GeneratedSentence) -> _),
        ("audio", &tables.audio, |s: &GeneratedSentence| s.audio.clone()),
        ("text", &tables.text, |s: &GeneratedSentence| s.text.clone()),
    ] {
        let norm = enc.direction.dot(&enc.direction);
        for (side, pick) in [("previous", 0), ("following", 1)] {
            let readout: Vec<f64> = triples
                .iter()
                .map(|t| {
                    let s = if pick == 0 { &t.previous } else { &t.following };
                    get(s).mean_axis(ndarray::Axis(0)).unwrap().dot(&enc.direction) / norm
                })
                .collect();
            let r = pearson(&readout, &pitch);
            assert!(r > 0.3, "{name}/{side}: {r}");
        }
    }
}

#[test]
fn current_lip_and_face_carry_no_state() {
    let (_, tables) = generate_triples(&small(1, 0)).unwrap();
    assert!(tables.lip.direction.iter().all(|&v| v == 0.0));
    assert!(tables.face.direction.iter().all(|&v| v == 0.0));
}

#[test]
fn inconsistent_durations_are_rejected_by_id() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&small(3, 2), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let mut manifest = Manifest::parse(&fs::read_to_string(&path).unwrap()).unwrap();
    let victim = manifest.records[1].id.clone();
    manifest.records[1].current.durations[0] -= 1;
    fs::write(&path, manifest.to_text().unwrap()).unwrap();
    match load_manifest(dir.path()) {
        Err(Error::Record { id, field, message }) => {
            assert_eq!(id, victim);
            assert_eq!(field, "durations");
            assert!(message.contains("mel"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn deleted_tensor_is_rejected_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(&small(3, 2), dir.path()).unwrap();
    let rel = manifest.records[2].following.tensors["audio"].clone();
    fs::remove_file(dir.path().join(&rel)).unwrap();
    let err = load_manifest(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&rel), "{err}");
    assert!(err.contains(&manifest.records[2].id), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        CorpusConfig { rho: 1.0, ..CorpusConfig::default() },
        CorpusConfig { rho: 0.0, ..CorpusConfig::default() },
        CorpusConfig { min_phonemes: 9, max_phonemes: 8, ..CorpusConfig::default() },
        CorpusConfig { min_duration: 0, ..CorpusConfig::default() },
        CorpusConfig { valid_fraction: 0.5, test_fraction: 0.5, ..CorpusConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn unwritable_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert!(matches!(generate_corpus(&small(1, 0), &blocker.join("sub")), Err(Error::Io { .. })));
}
