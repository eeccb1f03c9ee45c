use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_triples, CorpusConfig};

fn track(f0: &[f64]) -> PitchTrack {
    PitchTrack::from_f0(f0.to_vec()).unwrap()
}

fn sine(hz: f64, seconds: f64, amplitude: f64) -> Vec<f64> {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    (0..n).map(|i| amplitude * (std::f64::consts::TAU * hz * i as f64 / SAMPLE_RATE as f64).sin()).collect()
}

#[test]
fn sinusoids_are_tracked_within_five_hz() {
    for hz in [110.0, 220.0, 440.0] {
        let t = estimate_f0(&sine(hz, 1.0, 0.5), SAMPLE_RATE).unwrap();
        assert_eq!(t.len(), (16_000 - WINDOW) / HOP + 1);
        let interior = &t.f0()[1..t.len() - 1];
        let good = interior.iter().filter(|&&f| (f - hz).abs() <= 5.0).count();
        assert_eq!(good, interior.len(), "{hz} Hz: {:?}", &interior[..5]);
    }
}

#[test]
fn silence_and_short_signals_are_unvoiced() {
    let t = estimate_f0(&vec![0.0; 16_000], SAMPLE_RATE).unwrap();
    assert!(t.voiced().iter().all(|&v| !v));
    assert!(estimate_f0(&[0.1; 639], SAMPLE_RATE).unwrap().is_empty());
}

#[test]
fn white_noise_is_mostly_unvoiced() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Vec<f64> = (0..16_000).map(|_| rng.random_range(-0.3..0.3)).collect();
    let t = estimate_f0(&noise, SAMPLE_RATE).unwrap();
    let unvoiced = t.voiced().iter().filter(|&&v| !v).count() as f64 / t.len() as f64;
    assert!(unvoiced >= 0.9, "{unvoiced}");
}

#[test]
fn other_sample_rates_are_rejected() {
    assert!(estimate_f0(&sine(220.0, 0.1, 0.5), 22_050).is_err());
}

#[test]
fn pitch_track_rejects_out_of_range_values() {
    assert!(PitchTrack::from_f0(vec![0.0, 49.0]).is_err());
    assert!(PitchTrack::from_f0(vec![601.0]).is_err());
    assert!(PitchTrack::from_f0(vec![-1.0]).is_err());
    assert!(PitchTrack::from_f0(vec![f64::NAN]).is_err());
    let t = PitchTrack::from_phonemes(&[200f64.ln(), 5.0], &[true, false], &[2, 3]).unwrap();
    assert_eq!(t.voiced(), vec![true, true, false, false, false]);
    assert!((t.f0()[0] - 200.0).abs() < 1e-9);
}

#[test]
fn gpe_hand_tables() {
    let r = track(&[100.0, 200.0, 0.0, 150.0]);
    assert_eq!(gpe(&r, &r), Some(0.0));
    let scaled = track(&[130.0, 260.0, 0.0, 195.0]);
    assert_eq!(gpe(&r, &scaled), Some(100.0));
    // four jointly voiced frames, two beyond 20 %
    let r = track(&[100.0, 100.0, 100.0, 100.0, 0.0, 100.0]);
    let s = track(&[110.0, 125.0, 79.0, 100.0, 100.0, 0.0]);
    assert_eq!(gpe(&r, &s), Some(50.0));
    // no joint voicing is undefined, not zero
    assert_eq!(gpe(&track(&[100.0, 0.0]), &track(&[0.0, 100.0])), None);
}

#[test]
fn ffe_hand_tables() {
    let r = track(&[100.0, 0.0, 200.0, 0.0]);
    assert_eq!(ffe(&r, &r), 0.0);
    assert_eq!(ffe(&r, &track(&[0.0, 100.0, 0.0, 100.0])), 100.0);
    // two voicing errors and one pitch error in ten frames
    let r = track(&[100.0, 100.0, 0.0, 100.0, 100.0, 100.0, 100.0, 0.0, 0.0, 100.0]);
    let s = track(&[0.0, 100.0, 100.0, 150.0, 100.0, 100.0, 105.0, 0.0, 0.0, 100.0]);
    assert_eq!(ffe(&r, &s), 30.0);
}

#[test]
fn relative_error_uses_the_reference() {
    // 100 -> 125 is 25 % of the reference; 125 -> 100 is 20 %, not gross
    let (a, b) = (track(&[100.0]), track(&[125.0]));
    assert_eq!(gpe(&a, &b), Some(100.0));
    assert_eq!(gpe(&b, &a), Some(0.0));
}

#[test]
fn mismatched_lengths_are_truncated() {
    let r = track(&[100.0, 100.0, 100.0]);
    let s = track(&[100.0, 300.0]);
    assert_eq!(gpe(&r, &s), Some(50.0));
    assert_eq!(ffe(&r, &s), 50.0);
}

#[test]
fn wer_examples() {
    let t = Transcript::new;
    assert_eq!(wer(&t("a b c"), &t("a b c")).unwrap(), 0.0);
    assert!((wer(&t("a b c"), &t("a x c")).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(wer(&t("one two three four"), &t("")).unwrap(), 1.0);
    assert_eq!(wer(&t("a"), &t("b c d")).unwrap(), 3.0);
    assert!(wer(&t(""), &t("a")).is_err());
    assert_eq!(t("Hello, World!"), t("hello world"));
}

/// Frame classes of the brute-force oracle.
#[derive(Clone, Copy, PartialEq)]
enum Class {
    Silent,
    VoicingError,
    Match,
    Gross,
}

fn classify(r: f64, s: f64) -> Class {
    match (r > 0.0, s > 0.0) {
        (false, false) => Class::Silent,
        (true, false) | (false, true) => Class::VoicingError,
        _ if s > 1.2 * r || s < 0.8 * r => Class::Gross,
        _ => Class::Match,
    }
}

fn random_f0() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 50.0..600.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_brute_force_classifier(
        r in prop::collection::vec(random_f0(), 20),
        s in prop::collection::vec(random_f0(), 20),
    ) {
        let classes: Vec<Class> = r.iter().zip(&s).map(|(&a, &b)| classify(a, b)).collect();
        let count = |c: Class| classes.iter().filter(|&&x| x == c).count() as f64;
        let joint = count(Class::Match) + count(Class::Gross);
        let (rt, st) = (track(&r), track(&s));
        let expect_gpe = (joint > 0.0).then(|| 100.0 * count(Class::Gross) / joint);
        prop_assert_eq!(gpe(&rt, &st), expect_gpe);
        prop_assert_eq!(ffe(&rt, &st), 100.0 * (count(Class::Gross) + count(Class::VoicingError)) / 20.0);
        let g = gpe(&rt, &st).unwrap_or(0.0);
        prop_assert!((0.0..=100.0).contains(&g));
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec("[abc]", 0..8),
        b in prop::collection::vec("[abc]", 0..8),
    ) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, edit_distance(&b, &a));
        prop_assert!(d <= a.len().max(b.len()));
        prop_assert!(d >= a.len().abs_diff(b.len()));
        prop_assert_eq!(d == 0, a == b);
    }
}

#[test]
fn transcriber_reads_target_mels() {
    let cfg = CorpusConfig { num_triples: 10, ..CorpusConfig::default() };
    let (triples, tables) = generate_triples(&cfg).unwrap();
    let transcriber = TemplateTranscriber::new(&tables.envelope).unwrap();
    for t in &triples {
        let c = &t.current;
        let hyp = transcriber.transcribe(&c.mel, &c.durations, &word_lengths(&c.words)).unwrap();
        assert_eq!(wer(&Transcript::from_words(&c.words), &hyp).unwrap(), 0.0, "{}", t.id);
    }
}

#[test]
fn report_marks_undefined_scores() {
    let scores = vec![
        SampleScores { id: "a".into(), gpe: None, ffe: 10.0, wer: Some(0.5), pitch_mse: 0.1, energy_mse: 0.2, mel_l1: 0.3 },
        SampleScores { id: "b".into(), gpe: Some(20.0), ffe: 30.0, wer: None, pitch_mse: 0.3, energy_mse: 0.2, mel_l1: 0.1 },
    ];
    let report = EvalReport::new("full", scores);
    assert_eq!(report.mean_gpe(), Some(20.0));
    assert_eq!(report.mean_ffe(), Some(20.0));
    let table = report.to_table();
    assert!(table.contains("undef"));
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().last().unwrap().starts_with("mean"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.tsv");
    write_plot_data(&path, "loss", &[(0, 1.5), (10, 0.25)]).unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap(), "step\tloss\n0\t1.5\n10\t0.25\n");
}
