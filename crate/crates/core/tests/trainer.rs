use std::collections::HashMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmtbvqa::autograd::Graph;
use rmtbvqa::encoder::{Encoder, EncoderKind, EncoderSpec};
use rmtbvqa::error::Error;
use rmtbvqa::manifest::{Manifest, ManifestRow, Role};
use rmtbvqa::model;
use rmtbvqa::patch::Resolution;
use rmtbvqa::rmvit::RmvitConfig;
use rmtbvqa::schedule::lr_at;
use rmtbvqa::tensor::Tensor;
use rmtbvqa::trainer::{self, FitInputs, TrainConfig, TrainState, TrainingPool};

// --- schedule ------------------------------------------------------------

#[test]
fn schedule_endpoints_and_junction() {
    let (base, w, e) = (0.00025, 10.0, 150.0);
    assert_eq!(lr_at(0.0, base, w, e), 0.0);
    assert_eq!(lr_at(w, base, w, e), base);
    assert!(lr_at(e, base, w, e) < 1e-9 * base);
    assert!((lr_at(w - 1e-9, base, w, e) - lr_at(w + 1e-9, base, w, e)).abs() < 1e-12);
    assert!((lr_at(5.0, base, w, e) - base / 2.0).abs() < 1e-18);
    assert!((lr_at(80.0, base, w, e) - base / 2.0).abs() < 1e-15, "cosine midpoint");
}

#[test]
fn schedule_rises_then_falls() {
    let (base, w, e) = (0.1, 3.0, 30.0);
    let lrs: Vec<f64> = (0..=300).map(|i| lr_at(f64::from(i) / 10.0, base, w, e)).collect();
    assert!(lrs[..=30].windows(2).all(|p| p[1] > p[0]));
    assert!(lrs[30..].windows(2).all(|p| p[1] < p[0]));
    assert!(lrs.iter().all(|&v| (0.0..=base).contains(&v)));
    assert_eq!(lr_at(0.0, base, 0.0, e), base, "no warmup starts at the base rate");
}

#[test]
fn train_config_validation() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    for bad in [
        TrainConfig { batch_size: 1, ..ok.clone() },
        TrainConfig { warmup_epochs: 30.0, ..ok.clone() },
        TrainConfig { epochs: 0, ..ok.clone() },
        TrainConfig { momentum: 1.0, ..ok.clone() },
        TrainConfig { tau: 0.0, ..ok.clone() },
        TrainConfig { base_lr: f64::NAN, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

// --- fixtures ------------------------------------------------------------

fn tiny_model() -> RmvitConfig {
    RmvitConfig { dim: 8, memory_tokens: 2, segment_len: 2, depth: 1, heads: 2, ffn_mult: 2, ..Default::default() }
}

fn row(id: &str, src: &str, res: Resolution, role: Role, link: Option<&str>, score: Option<f64>) -> ManifestRow {
    ManifestRow {
        patch_id: id.into(),
        source_id: src.into(),
        enhancement_tag: "t".into(),
        resolution: res,
        role,
        reference_link: link.map(Into::into),
        proxy_score: score,
        path: PathBuf::from(format!("patches/{id}.rmtt")),
    }
}

/// `n` labelled full patches over three sources, with down and reference
/// rows, and random `6 × 8` embeddings for every patch.
fn fixture(n: usize) -> (Manifest, HashMap<String, Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut m = Manifest::default();
    let mut emb = HashMap::new();
    for i in 0..n {
        let (id, src) = (format!("p{i}"), format!("s{}", i % 3));
        let score = 20.0 + 3.0 * i as f64;
        m.rows.push(row(&format!("{id}_ref"), &src, Resolution::Full, Role::Reference, None, Some(100.0)));
        m.rows.push(row(&id, &src, Resolution::Full, Role::Enhanced, Some(&format!("{id}_ref")), Some(score)));
        m.rows.push(row(&format!("{id}_down"), &src, Resolution::Down, Role::Enhanced, Some(&id), Some(score)));
        for pid in [id.clone(), format!("{id}_down")] {
            emb.insert(pid, Tensor::matrix(6, 8, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        }
    }
    m.validate().unwrap();
    (m, emb)
}

fn encoder() -> Encoder {
    Encoder::new(&EncoderSpec { kind: EncoderKind::SeededProjection, dim: 8, seed: 1, index: None }).unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 2, epochs, base_lr: 0.05, warmup_epochs: 0.5, seed: 9, ..Default::default() }
}

// --- batches -------------------------------------------------------------

#[test]
fn batch_of_two_has_four_items_with_linked_counterparts() {
    let (m, _) = fixture(5);
    let pool = TrainingPool::from_manifest(&m).unwrap();
    assert_eq!(pool.len(), 5);
    let b = trainer::build_batch(&pool, &[3, 1]).unwrap();
    assert_eq!(b.ids, ["p3", "p1", "p3_down", "p1_down"]);
    for i in 0..2 {
        let full = m.get(&b.ids[i]).unwrap();
        let down = m.get(&b.ids[2 + i]).unwrap();
        assert_eq!((full.resolution, down.resolution), (Resolution::Full, Resolution::Down));
        assert_eq!(down.reference_link.as_deref(), Some(full.patch_id.as_str()));
    }
    assert_eq!(b.ann.sources, ["s0", "s1"]);
    assert_eq!(b.ann.scores, [29.0, 23.0]);
    assert!(trainer::build_batch(&pool, &[7]).is_err());
}

#[test]
fn batch_sequences_are_seeded() {
    let (m, _) = fixture(7);
    let pool = TrainingPool::from_manifest(&m).unwrap();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5).map(|_| trainer::sample_batch(&pool, 3, &mut rng).unwrap().ids).collect::<Vec<_>>()
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
    assert!(matches!(trainer::sample_batch(&pool, 8, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Insufficient(_))));

    let e0 = trainer::epoch_batches(7, 3, 4, 0).unwrap();
    assert_eq!(e0, trainer::epoch_batches(7, 3, 4, 0).unwrap());
    assert_ne!(e0, trainer::epoch_batches(7, 3, 4, 1).unwrap());
    assert_eq!(e0.len(), 2, "the remainder is dropped");
    let mut seen: Vec<usize> = e0.concat();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 6, "no anchor repeats within an epoch");
}

#[test]
fn unlabelled_or_unpaired_patches_cannot_train() {
    let (mut m, _) = fixture(3);
    m.rows[1].proxy_score = None;
    assert!(TrainingPool::from_manifest(&m).is_err());
    let (mut m, _) = fixture(3);
    m.rows.retain(|r| r.patch_id != "p2_down");
    assert!(matches!(TrainingPool::from_manifest(&m), Err(Error::MissingReference(_))));
}

// --- optimisation --------------------------------------------------------

#[test]
fn momentum_step_descends_a_quadratic() {
    // f(x, y) = (x − 1)² + 4(y + 2)²
    let f = |p: &[f32]| (f64::from(p[0]) - 1.0).powi(2) + 4.0 * (f64::from(p[1]) + 2.0).powi(2);
    let grad = |p: &[f32]| vec![2.0 * (f64::from(p[0]) - 1.0), 8.0 * (f64::from(p[1]) + 2.0)];
    let (mut p, mut v) = (vec![3.0f32, 1.0], vec![0.0f32; 2]);
    let start = f(&p);
    let g = grad(&p);
    trainer::momentum_step(&mut p, &mut v, &g, 0.05, 0.9, 0.0);
    assert!(f(&p) < start);
    for _ in 0..300 {
        let g = grad(&p);
        trainer::momentum_step(&mut p, &mut v, &g, 0.05, 0.9, 0.0);
    }
    assert!((p[0] - 1.0).abs() < 1e-4 && (p[1] + 2.0).abs() < 1e-4, "{p:?}");

    let (mut p, mut v) = (vec![2.0f32], vec![0.5f32]);
    trainer::momentum_step(&mut p, &mut v, &[0.0], 0.1, 0.5, 0.1);
    // v = 0.5·0.5 + 0 + 0.1·2 = 0.45, p = 2 − 0.1·0.45
    assert!((v[0] - 0.45).abs() < 1e-7 && (p[0] - 1.955).abs() < 1e-6);
}

fn batch_items(emb: &HashMap<String, Tensor>, ids: &[String]) -> Vec<Tensor> {
    ids.iter().map(|id| emb[id].clone()).collect()
}

fn loss_of(state: &TrainState, cfg: &TrainConfig, items: &[Tensor], ann: &rmtbvqa::loss::BatchAnnotations) -> f64 {
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, false);
    let out = model::batch_loss(&mut g, &tiny_model(), &p, items, ann, 3.0, &cfg.weights()).unwrap();
    g.value(out.loss).scalar()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (m, emb) = fixture(4);
    let pool = TrainingPool::from_manifest(&m).unwrap();
    let b = trainer::build_batch(&pool, &[0, 1, 2, 3]).unwrap();
    let cfg = train_cfg(1);
    let mut state = TrainState::new(&tiny_model(), 3).unwrap();
    let before = state.params.clone();
    let o = trainer::train_step(&mut state, &tiny_model(), &cfg, 3.0, &batch_items(&emb, &b.ids), &b.ann, 0.0).unwrap();
    assert!(o.loss.is_finite() && o.grad_norm > 0.0);
    assert_eq!(state.params, before);
    assert_eq!(state.step, 1);
}

#[test]
fn a_small_step_lowers_the_batch_loss() {
    let (m, emb) = fixture(4);
    let pool = TrainingPool::from_manifest(&m).unwrap();
    let b = trainer::build_batch(&pool, &[0, 1, 2, 3]).unwrap();
    let cfg = TrainConfig { momentum: 0.0, ..train_cfg(1) };
    let items = batch_items(&emb, &b.ids);
    let mut state = TrainState::new(&tiny_model(), 3).unwrap();
    let before = loss_of(&state, &cfg, &items, &b.ann);
    let o = trainer::train_step(&mut state, &tiny_model(), &cfg, 3.0, &items, &b.ann, 1e-3).unwrap();
    assert!((o.loss - before).abs() < 1e-12);
    assert!(loss_of(&state, &cfg, &items, &b.ann) < before);
}

// --- fit -----------------------------------------------------------------

fn fit_until(dir: &std::path::Path, epochs: usize, resume: Option<TrainState>, stop: usize) -> trainer::FitOutcome {
    let (m, emb) = fixture(8);
    let enc = encoder();
    let model = tiny_model();
    let train = train_cfg(epochs);
    let inputs =
        FitInputs { manifest: &m, embeddings: &emb, encoder: &enc, model: &model, train: &train, threshold: 3.0 };
    trainer::fit_until(&inputs, dir, resume, stop).unwrap()
}

fn fit(dir: &std::path::Path, epochs: usize, resume: Option<TrainState>) -> trainer::FitOutcome {
    fit_until(dir, epochs, resume, epochs)
}

#[test]
fn one_epoch_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit(dir.path(), 1, None);
    assert_eq!(out.curve.len(), 4, "8 anchors in batches of 2");
    assert!(out.curve.iter().all(|p| p.loss.is_finite()));
    assert!(out.checkpoint.join("meta.json").is_file());
    assert_eq!(trainer::read_curve(&out.loss_curve).unwrap(), out.curve);
    let header = std::fs::read_to_string(&out.loss_curve).unwrap();
    assert!(header.starts_with("step,epoch,lr,loss\n"));
    let (state, meta) = trainer::resume_state(&out.checkpoint).unwrap();
    assert_eq!((state.epoch, state.step), (1, 4));
    assert_eq!(meta.encoder_fingerprint, encoder().fingerprint());
    assert_eq!(meta.model, tiny_model());
}

#[test]
fn curve_has_one_point_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit(dir.path(), 3, None);
    assert_eq!(out.curve.len(), 12);
    assert_eq!(out.epoch_losses.len(), 3);
    assert!(out.curve.iter().enumerate().all(|(i, p)| p.step == i as u64));
    assert_eq!(out.curve[0].lr, 0.0);
}

#[test]
fn training_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (fit(a.path(), 2, None), fit(b.path(), 2, None));
    assert_eq!(ra.curve, rb.curve);
    let (sa, _) = trainer::resume_state(&ra.checkpoint).unwrap();
    let (sb, _) = trainer::resume_state(&rb.checkpoint).unwrap();
    assert_eq!(sa.params, sb.params);
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_curve() {
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let straight = fit(full.path(), 3, None);
    let first = fit_until(part.path(), 3, None, 1);
    assert_eq!(first.curve.len(), 4);
    let (state, _) = trainer::resume_state(&first.checkpoint).unwrap();
    let resumed = fit(part.path(), 3, Some(state));
    assert_eq!(resumed.curve.len(), straight.curve.len());
    for (a, b) in resumed.curve.iter().zip(&straight.curve) {
        assert_eq!((a.step, a.epoch, a.lr), (b.step, b.epoch, b.lr));
        assert!((a.loss - b.loss).abs() < 1e-12, "step {}: {} vs {}", a.step, a.loss, b.loss);
    }
    let (sa, _) = trainer::resume_state(&resumed.checkpoint).unwrap();
    let (sb, _) = trainer::resume_state(&straight.checkpoint).unwrap();
    assert_eq!(sa.params, sb.params);
}

#[test]
fn fit_checks_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (m, mut emb) = fixture(4);
    let model = tiny_model();
    let train = train_cfg(1);
    let wide =
        Encoder::new(&EncoderSpec { kind: EncoderKind::SeededProjection, dim: 16, seed: 1, index: None }).unwrap();
    let inputs =
        FitInputs { manifest: &m, embeddings: &emb, encoder: &wide, model: &model, train: &train, threshold: 3.0 };
    assert!(matches!(trainer::fit(&inputs, dir.path(), None), Err(Error::Config(_))));

    emb.remove("p2_down");
    let enc = encoder();
    let inputs =
        FitInputs { manifest: &m, embeddings: &emb, encoder: &enc, model: &model, train: &train, threshold: 3.0 };
    assert!(matches!(trainer::fit(&inputs, dir.path(), None), Err(Error::MissingKey(_))));
}

#[test]
fn divergence_writes_a_diagnostic_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (m, emb) = fixture(4);
    let enc = encoder();
    let model = tiny_model();
    let train = TrainConfig { base_lr: 1e300, warmup_epochs: 0.0, momentum: 0.0, ..train_cfg(3) };
    let inputs =
        FitInputs { manifest: &m, embeddings: &emb, encoder: &enc, model: &model, train: &train, threshold: 3.0 };
    match trainer::fit(&inputs, dir.path(), None) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
    let dump: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("diverged.json")).unwrap()).unwrap();
    assert!(dump["batch"].as_array().is_some_and(|b| b.len() == 4));
}
