use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::extraction::ContextSentence;
use crate::nncore::{gradient_check, FeatureSequence, GradCheckOptions};
use crate::params::ParamStore;
use crate::tape::Graph;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn context(cfg: &ModelConfig, phonemes: usize, video: usize, audio: usize, rng: &mut ChaCha8Rng) -> ContextSentence<f64> {
    ContextSentence::new(
        "ctx",
        FeatureSequence::new(random(video, cfg.video_dim, rng)).unwrap(),
        (0..phonemes).map(|_| rng.random_range(0..cfg.vocab)).collect(),
        FeatureSequence::new(random(audio, cfg.audio_dim, rng)).unwrap(),
        Some(FeatureSequence::new(random(phonemes, cfg.text_dim, rng)).unwrap()),
    )
    .unwrap()
}

fn sample(cfg: &ModelConfig, phonemes: usize, seed: u64) -> DubbingSample<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let durations: Vec<usize> = (0..phonemes).map(|_| rng.random_range(2..=6)).collect();
    let frames: usize = durations.iter().sum();
    let lip_steps = (frames / 4).max(4);
    let (ctx_video, ctx_audio) = (4 << cfg.context_video_layers.saturating_sub(2), 16 << cfg.context_audio_layers.saturating_sub(4));
    DubbingSample {
        id: format!("s{seed}"),
        phonemes: (0..phonemes).map(|_| rng.random_range(0..cfg.vocab)).collect(),
        log_pitch: Array1::from_shape_fn(phonemes, |_| 5.0 + rng.random_range(-0.2..0.2)),
        energy: Array1::from_shape_fn(phonemes, |_| 1.0 + rng.random_range(-0.3..0.3)),
        voiced: vec![true; phonemes],
        mel: random(frames, cfg.mel_bins, &mut rng),
        lip: Some(FeatureSequence::new(random(lip_steps, cfg.lip_dim, &mut rng)).unwrap()),
        face: Some(FeatureSequence::new(random(lip_steps, cfg.face_dim, &mut rng)).unwrap()),
        context_pre: Some(context(cfg, 3, ctx_video.max(8), ctx_audio.max(16), &mut rng)),
        context_fol: Some(context(cfg, 2, ctx_video.max(8), ctx_audio.max(16), &mut rng)),
        transcript: vec!["w".into()],
        durations,
    }
}

fn small() -> ModelConfig {
    ModelConfig { dropout: 0.1, ..ModelConfig::reduced(16) }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).fold(0.0, |m, &v| m.max(v))
}

#[test]
fn current_encoding_shapes_and_path_separation() {
    let cfg = ModelConfig { text_layers: 1, ..ModelConfig::default() };
    let mut store = ParamStore::<f64>::new(1);
    let model = DubbingModel::new(&mut store, cfg.clone()).unwrap();
    let s = sample(&cfg, 12, 1);
    let run = |lip: Option<&FeatureSequence<f64>>| {
        let mut g = Graph::new(&store);
        let out = model.current.forward(&mut g, &s.phonemes, lip, &s.durations).unwrap();
        (g.value(out.t_cur).clone(), g.value(out.h).clone(), out.lip_skipped)
    };
    let (t, h, skipped) = run(s.lip.as_ref());
    assert_eq!(h.dim(), (12, 256));
    assert!(!skipped);

    let (t0, h0, skipped0) = run(None);
    assert!(skipped0);
    assert_eq!(h0, t0);
    assert_eq!(t0, t);

    let doubled = FeatureSequence::new(s.lip.as_ref().unwrap().data() * 2.0).unwrap();
    let (t2, h2, _) = run(Some(&doubled));
    assert_eq!(t2, t);
    assert!(max_abs_diff(&h2, &h) > 1e-6);

    let short = FeatureSequence::new(Array2::ones((3, cfg.lip_dim))).unwrap();
    let (_, h3, skipped3) = run(Some(&short));
    assert!(skipped3);
    assert_eq!(h3, t);
}

#[test]
fn span_pooling_rows_average_their_frames() {
    // phoneme spans [0, 3) and [3, 10) at 4 frames per step over 3 steps
    let pool = span_pooling::<f64>(&[3, 7], 4, 3);
    assert_eq!(pool.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
    let expect = [1.0 / 7.0, 4.0 / 7.0, 2.0 / 7.0];
    for (a, b) in pool.row(1).iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    // frames past the last step clamp onto it
    let pool = span_pooling::<f64>(&[5], 2, 1);
    assert_eq!(pool[[0, 0]], 1.0);
}

#[test]
fn gated_fusion_properties() {
    let mut store = ParamStore::<f64>::new(2);
    let gate = GatedFusion::new(&mut store, "g", 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (pre, fol) = (random(7, 8, &mut rng), random(7, 8, &mut rng));

    let mut g = Graph::new(&store);
    let a = g.constant(pre.clone());
    let out = gate.forward(&mut g, Some(a), Some(a)).unwrap().unwrap();
    assert!(max_abs_diff(g.value(out), &pre) < 1e-15);

    let b = g.constant(fol.clone());
    let out = gate.forward(&mut g, Some(a), Some(b)).unwrap().unwrap();
    assert_eq!(g.shape(out), (7, 8));
    for ((&o, &p), &f) in g.value(out).iter().zip(pre.iter()).zip(fol.iter()) {
        assert!(o >= p.min(f) - 1e-12 && o <= p.max(f) + 1e-12);
    }
    assert_eq!(gate.forward(&mut g, None, Some(b)).unwrap(), Some(b));
    assert_eq!(gate.forward(&mut g, Some(a), None).unwrap(), Some(a));
    assert_eq!(gate.forward(&mut g, None, None).unwrap(), None);

    // saturated gate: 1 - σ(20) ≈ 2.1e-9, times |pre - fol| ≤ 2
    store.set(gate.gate.weight, Array2::zeros((16, 8))).unwrap();
    store.set(gate.gate.bias, Array2::from_elem((1, 8), 20.0)).unwrap();
    let mut g = Graph::new(&store);
    let (a, b) = (g.constant(pre.clone()), g.constant(fol));
    let out = gate.forward(&mut g, Some(a), Some(b)).unwrap().unwrap();
    assert!(max_abs_diff(g.value(out), &pre) < 1e-6);
}

#[test]
fn adaptor_identity_single_key_and_sensitivity() {
    let mut store = ParamStore::<f64>::new(3);
    let caa = ContextAwareAdaptor::new(&mut store, "caa", 8, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = random(5, 8, &mut rng);

    let mut g = Graph::new(&store);
    let hv = g.constant(h.clone());
    let out = caa.adapt(&mut g, hv, None).unwrap();
    assert_eq!(out.seq, hv);

    let fused = g.constant(random(1, 8, &mut rng));
    let out = caa.adapt(&mut g, hv, Some(fused)).unwrap();
    let w = out.attention.unwrap().materialize(&g).unwrap().weights;
    assert!(w.iter().all(|&x| x == 1.0));

    let mut g = Graph::new(&store);
    let hv = g.constant(h);
    let fused = g.variable(random(4, 8, &mut rng));
    let out = caa.adapt(&mut g, hv, Some(fused)).unwrap();
    let loss = g.sum(out.seq);
    let back = g.backward(loss).unwrap();
    assert!(back.wrt(fused).unwrap().iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn variance_buckets_cover_the_range() {
    let stats = VarianceStats::from_values([4.0, 5.0, 6.0]).unwrap();
    assert_eq!(stats.bucket(4.0, 256), 0);
    assert_eq!(stats.bucket(6.0, 256), 255);
    assert_eq!(stats.bucket(3.0, 256), 0);
    assert_eq!(stats.bucket(9.0, 256), 255);
    assert_eq!(stats.bucket(5.0, 256), 128);
    assert!((stats.mean - 5.0).abs() < 1e-12);
    assert!((stats.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

#[test]
fn length_regulation() {
    let store = ParamStore::<f64>::new(0);
    let mut g = Graph::new(&store);
    let h = g.constant(Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64));
    let out = length_regulate(&mut g, h, &[2, 3]).unwrap();
    assert_eq!(g.shape(out), (5, 3));
    assert_eq!(g.value(out).row(1), g.value(h).row(0));
    assert_eq!(g.value(out).row(2), g.value(h).row(1));

    let same = length_regulate(&mut g, h, &[1, 1]).unwrap();
    assert_eq!(g.value(same), g.value(h));

    let h12 = g.constant(Array2::zeros((12, 256)));
    let durations = [9, 8, 7, 6, 5, 4, 10, 11, 6, 8, 9, 7];
    assert_eq!(durations.iter().sum::<usize>(), 90);
    let out = length_regulate(&mut g, h12, &durations).unwrap();
    assert_eq!(g.shape(out), (90, 256));

    assert!(length_regulate(&mut g, h, &[2, 0]).is_err());
    assert!(length_regulate(&mut g, h, &[2]).is_err());
}

#[test]
fn mel_decoder_shape_and_determinism() {
    let cfg = ModelConfig { decoder_layers: 4, ..ModelConfig::default() };
    let mut store = ParamStore::<f32>::new(4);
    let decoder = MelDecoder::new(&mut store, "dec", cfg.decoder_layers, cfg.mel_bins, &cfg.fft()).unwrap();
    let x = Array2::from_shape_fn((90, 256), |(i, j)| ((i * 7 + j) as f32 * 0.01).sin());
    let run = || {
        let mut g = Graph::new(&store);
        let v = g.constant(x.clone());
        let out = decoder.forward(&mut g, v).unwrap();
        g.value(out).clone()
    };
    let a = run();
    assert_eq!(a.dim(), (90, 80));
    assert_eq!(a, run());
}

#[test]
fn mel_decoder_gradient_check() {
    let cfg = ModelConfig::miniature();
    let mut store = ParamStore::<f64>::new(4);
    let decoder = MelDecoder::new(&mut store, "dec", 1, cfg.mel_bins, &cfg.fft()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(5, cfg.hidden, &mut rng);
    let w = random(5, cfg.mel_bins, &mut rng);
    let report = gradient_check(
        &mut store,
        |g| {
            let v = g.constant(x.clone());
            let y = decoder.forward(g, v)?;
            let y = g.mul_const(y, w.clone())?;
            Ok(g.sum(y))
        },
        &GradCheckOptions { epsilon: 1e-5, ..Default::default() },
    )
    .unwrap();
    assert!(report.passes(1e-4), "{:?} {}", report.flagged(1e-4), report.max_rel());
}

#[test]
fn losses_closed_forms() {
    let cfg = ModelConfig::miniature();
    let s = sample(&cfg, 4, 9);
    let store = ParamStore::<f64>::new(0);
    let column = |a: &Array1<f64>| a.clone().into_shape_with_order((a.len(), 1)).unwrap();

    let mut g = Graph::new(&store);
    let mel = g.constant(s.mel.clone());
    let p = g.constant(column(&s.log_pitch));
    let e = g.constant(column(&s.energy));
    let l = compute_losses(&mut g, mel, p, e, &s, &LossWeights::default()).unwrap().values(&g);
    assert_eq!(l.total, 0.0);

    let shifted = g.constant(&s.mel + 1.0);
    let l = compute_losses(&mut g, shifted, p, e, &s, &LossWeights::default()).unwrap().values(&g);
    assert!((l.total - 1.0).abs() < 1e-12);
    assert!((l.mel - 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let mel = g.constant(random(s.frames(), cfg.mel_bins, &mut rng));
        let p = g.constant(random(4, 1, &mut rng));
        let e = g.constant(random(4, 1, &mut rng));
        let l = compute_losses(&mut g, mel, p, e, &s, &LossWeights::default()).unwrap().values(&g);
        assert!(l.total >= 0.0 && l.mel >= 0.0 && l.pitch >= 0.0 && l.energy >= 0.0);
    }

    let wrong = g.constant(Array2::zeros((s.frames() + 1, cfg.mel_bins)));
    assert!(compute_losses(&mut g, wrong, p, e, &s, &LossWeights::default()).is_err());
}

#[test]
fn forward_contracts() {
    let cfg = small();
    let mut store = ParamStore::<f64>::new(5);
    let model = DubbingModel::new(&mut store, cfg.clone()).unwrap();
    let fe = model.front_ends();
    let s = sample(&cfg, 6, 11);
    let run = |s: &DubbingSample<f64>, opts: &ForwardOptions| {
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, s, &fe, opts).unwrap();
        (out.materialize(&g), out.fused_pre.is_some(), out.fused_fol.is_some())
    };
    let full = ForwardOptions::inference(Ablations::none());
    let (p, pre, fol) = run(&s, &full);
    assert!(pre && fol);
    assert_eq!(p.mel.dim(), (s.durations.iter().sum(), cfg.mel_bins));
    assert_eq!(p.log_pitch.len(), 6);
    assert_eq!(p.energy.len(), 6);
    // deterministic in evaluation mode
    assert_eq!(run(&s, &full).0.mel, p.mel);

    // no context at all is the context-free pipeline
    let (base, pre, fol) = run(&s.without_context(), &full);
    assert!(!pre && !fol);
    let both = ForwardOptions::inference(Ablations::of(&[Ablation::Previous, Ablation::Following]));
    let (ablated, ..) = run(&s, &both);
    assert_eq!(ablated.mel, base.mel);
    assert_eq!(ablated.log_pitch, base.log_pitch);
    assert!(max_abs_diff(&p.mel, &base.mel) > 1e-9);

    let (no_int, ..) = run(&s, &ForwardOptions::inference(Ablations::of(&[Ablation::IntIma])));
    assert!(max_abs_diff(&no_int.mel, &p.mel) > 1e-9);

    // every single ablation runs and changes the output
    for a in Ablation::ALL {
        let (out, ..) = run(&s, &ForwardOptions::inference(Ablations::of(&[a])));
        assert!(max_abs_diff(&out.mel, &p.mel) > 1e-12, "{a} left the output unchanged");
    }
}

#[test]
fn ablations_remove_their_parameters() {
    let cfg = ModelConfig { tie_context_encoders: false, dropout: 0.0, ..small() };
    let mut store = ParamStore::<f64>::new(6);
    let model = DubbingModel::new(&mut store, cfg.clone()).unwrap();
    let fe = model.front_ends();
    let s = sample(&cfg, 5, 12);
    let touched = |flags: &[Ablation]| -> Vec<String> {
        let mut g = Graph::new(&store);
        let (_, loss) = model.loss(&mut g, &s, &fe, &ForwardOptions::training(Ablations::of(flags))).unwrap();
        let grads = g.backward(loss.total).unwrap().into_params();
        grads
            .iter()
            .filter(|(_, v)| v.iter().any(|x| *x != 0.0))
            .map(|(id, _)| store.name(id).to_string())
            .collect()
    };
    let any = |names: &[String], prefix: &str| names.iter().any(|n| n.starts_with(prefix));
    let full = touched(&[]);
    for prefix in [
        "context.previous.extract.video",
        "context.following.aggregate.audio.cross_attn",
        "context.previous.fuse.gae",
        "adaptor.fusion",
        "adaptor.attn",
    ] {
        assert!(any(&full, prefix), "{prefix} unused by the full model");
    }
    assert!(!any(&full, "context.previous.aggregate.text.constant_query"));
    assert!(!any(&full, "context.previous.aggregate.text.bypass"));

    let cases: &[(Ablation, &[&str])] = &[
        (Ablation::Previous, &["context.previous"]),
        (Ablation::Following, &["context.following"]),
        (Ablation::Video, &["context.previous.extract.video", "context.following.aggregate.video"]),
        (Ablation::Text, &["context.previous.extract.text", "context.following.aggregate.text"]),
        (Ablation::Audio, &["context.previous.extract.audio", "context.following.aggregate.audio"]),
        (Ablation::Local, &["context.previous.extract", "context.following.aggregate.video.cross_attn"]),
        (Ablation::Imf, &["context.previous.fuse.gae", "context.following.fuse.gae"]),
        (Ablation::Caa, &["adaptor"]),
        (
            Ablation::Ima,
            &["context.previous.aggregate.video.fuse_in", "context.following.aggregate.audio.self_attn"],
        ),
    ];
    for (flag, removed) in cases {
        let names = touched(&[*flag]);
        for prefix in *removed {
            assert!(!any(&names, prefix), "{flag}: {prefix} still receives gradient");
        }
    }
    // the substitutes are used instead
    assert!(any(&touched(&[Ablation::IntIma]), "context.previous.aggregate.text.constant_query"));
    assert!(any(&touched(&[Ablation::Ima]), "context.previous.aggregate.text.bypass"));
    // flags compose
    let names = touched(&[Ablation::Video, Ablation::Imf, Ablation::Following]);
    for prefix in ["context.previous.extract.video", "context.previous.fuse.gae", "context.following"] {
        assert!(!any(&names, prefix));
    }
    assert!(any(&names, "context.previous.extract.audio"));
}

#[test]
fn ima_bypass_still_uses_local_encoders() {
    // with the aggregation bypassed the local text sequence still feeds the
    // projection, so the context text encoder keeps a gradient unless local
    // features are also removed
    let cfg = ModelConfig { tie_context_encoders: false, dropout: 0.0, ..small() };
    let mut store = ParamStore::<f64>::new(6);
    let model = DubbingModel::new(&mut store, cfg.clone()).unwrap();
    let fe = model.front_ends();
    let s = sample(&cfg, 5, 13);
    let used = |flags: &[Ablation], prefix: &str| {
        let mut g = Graph::new(&store);
        let (_, loss) = model.loss(&mut g, &s, &fe, &ForwardOptions::training(Ablations::of(flags))).unwrap();
        let grads = g.backward(loss.total).unwrap().into_params();
        let used = grads.iter().any(|(id, v)| store.name(id).starts_with(prefix) && v.iter().any(|x| *x != 0.0));
        used
    };
    assert!(used(&[Ablation::Ima], "context.previous.extract.audio"));
    assert!(!used(&[Ablation::Ima, Ablation::Local], "context.previous.extract.audio"));
}

#[test]
fn end_to_end_gradient_check() {
    let cfg = ModelConfig::miniature();
    let mut store = ParamStore::<f64>::new(21);
    let model = DubbingModel::new(&mut store, cfg.clone()).unwrap();
    let fe = model.front_ends();
    let s = sample(&cfg, 3, 14);
    assert_eq!(s.context_pre.as_ref().unwrap().video_frames.steps() >> cfg.context_video_layers, 2);
    let opts = ForwardOptions::training(Ablations::none());
    let report = gradient_check(
        &mut store,
        |g| Ok(model.loss(g, &s, &fe, &opts)?.1.total),
        &GradCheckOptions { epsilon: 1e-5, max_entries_per_param: Some(6), ..Default::default() },
    )
    .unwrap();
    assert!(report.passes(1e-3), "{:?} {}", report.flagged(1e-3), report.max_rel());
}
