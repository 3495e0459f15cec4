use std::collections::BTreeMap;

use super::*;
use crate::alignment::{align_loss, ProjectorSpec};
use crate::model::forward;
use crate::taskgen::{make_dataset, vocab::vocab_size, Canvas, Environment, SplitSpec};
use crate::teacher::{build_cache, Teacher, TeacherConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        width: 16,
        heads: 2,
        vocab: vocab_size(),
        max_len: 32,
        ..ModelConfig::default()
    }
}

fn fixture(n: usize) -> (ModelConfig, Vec<Episode>, Vec<Sample>, FeatureCache, Teacher) {
    let model = tiny();
    let canvas = Canvas::for_model(&model).unwrap();
    let eps = make_dataset(n, &SplitSpec::default(), Environment::InDistribution, &Prng::new(5, 0), canvas).unwrap();
    let samples = samples_from_episodes(&eps, 3).unwrap();
    let teacher = Teacher::new(TeacherConfig { d_t: 8, ..TeacherConfig::default() }).unwrap();
    let cache = build_cache(&teacher, eps.iter().flat_map(|e| &e.frames)).unwrap();
    (model, eps, samples, cache, teacher)
}

fn base(model: &ModelConfig) -> ParamStore {
    init_params(model, &mut Prng::new(9, 1)).unwrap()
}

fn cfg(mode: Mode, steps: usize) -> TrainConfig {
    TrainConfig {
        mode,
        steps,
        batch_size: 2,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn sgd_step_matches_closed_form_on_quadratic() {
    // f(x) = 0.5 * |x|^2 has gradient x, so one step gives (1 - lr) x.
    let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
    opt.begin_step();
    let next = opt.apply("x", &x, &x);
    for (a, b) in next.data().iter().zip(x.data()) {
        assert!((a - 0.9 * b).abs() < 1e-15);
    }
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let x = Tensor::vector(vec![1.0, -2.0]);
    let g = Tensor::vector(vec![0.3, -4.0]);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
    opt.begin_step();
    let next = opt.apply("x", &x, &g);
    assert!((next.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
    assert!((next.data()[1] - (-2.0 + 0.01)).abs() < 1e-6);
}

#[test]
fn clipping_bounds_global_norm() {
    let mut grads = BTreeMap::new();
    grads.insert("a".to_string(), Tensor::vector(vec![3.0]));
    grads.insert("b".to_string(), Tensor::vector(vec![4.0]));
    let norm = clip_global_norm(&mut grads, 1.0);
    assert!((norm - 5.0).abs() < 1e-15);
    assert!((grads["a"].data()[0] - 0.6).abs() < 1e-15);
    assert!((grads["b"].data()[0] - 0.8).abs() < 1e-15);
    let mut small = BTreeMap::from([("a".to_string(), Tensor::vector(vec![0.1]))]);
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small["a"].data()[0], 0.1);
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let c = cfg(Mode::Align, 3);
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
    let bad = TrainConfig { lr: 0.0, ..c.clone() };
    assert!(matches!(bad.validate(&tiny()), Err(Error::Config(_))));
    let neg = TrainConfig {
        align: AlignConfig { lambda: -0.1, ..AlignConfig::default() },
        ..c
    };
    assert!(matches!(neg.validate(&tiny()), Err(Error::Config(_))));
}

#[test]
fn frames_are_numbered_like_the_feature_cache() {
    let (_, eps, samples, cache, _) = fixture(3);
    let frames: usize = eps.iter().map(|e| e.frames.len()).sum();
    assert_eq!(samples.len(), frames);
    assert_eq!(cache.len(), frames);
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.frame, i as u64);
        assert_eq!(cache.get(s.frame).unwrap().image_hash, crate::teacher::image_hash(&s.seq.image));
    }
}

#[test]
fn recorded_total_matches_components() {
    let (model, _, samples, cache, _) = fixture(2);
    let c = TrainConfig {
        align: AlignConfig { lambda: 0.37, ..AlignConfig::default() },
        ..cfg(Mode::Align, 5)
    };
    let mut st = TrainState::new(model, base(&tiny()), &c, Some(8)).unwrap();
    let rec = run_training(&mut st, &samples, Some(&cache), &c, None).unwrap();
    for r in &rec.steps {
        assert!((r.total - (r.l_vla + 0.37 * r.l_align)).abs() <= 1e-12);
    }
}

#[test]
fn align_loss_matches_independent_evaluation() {
    let (model, _, samples, cache, _) = fixture(1);
    let c = cfg(Mode::Align, 1);
    let mut st = TrainState::new(model.clone(), base(&model), &c, Some(8)).unwrap();
    let s = &samples[0];
    let merged = st.merged().unwrap();
    let trace = forward(&model, &merged, &s.seq, None).unwrap();
    let h = crate::model::extract_vision_tokens(&trace, c.align.resolve_layer(model.layers)).unwrap();
    let u = st.projector.as_ref().unwrap().project(&h, None).unwrap();
    let expect = align_loss(&u, &cache.get(0).unwrap().z, &c.align.similarity).unwrap();
    let r = st.train_step(&c, &[s], Some(&cache)).unwrap();
    assert!((r.l_align - expect).abs() < 1e-9, "{} vs {expect}", r.l_align);
}

#[test]
fn freeze_leaves_visual_encoder_bytes_unchanged() {
    let (model, _, samples, _, _) = fixture(2);
    for full in [false, true] {
        let c = TrainConfig { full_finetune: full, ..cfg(Mode::Freeze, 4) };
        let b = base(&model);
        let mut st = TrainState::new(model.clone(), b.clone(), &c, None).unwrap();
        let before = st.merged().unwrap().with_prefix(IMAGE_ENCODER_PREFIX);
        run_training(&mut st, &samples, None, &c, None).unwrap();
        let after = st.merged().unwrap().with_prefix(IMAGE_ENCODER_PREFIX);
        assert_eq!(before.digest(), after.digest());
        for (name, t) in before.iter() {
            assert_eq!(t.to_vlat_bytes(), after.get(name).unwrap().to_vlat_bytes());
        }
        // Something else did move.
        assert_ne!(st.merged().unwrap().digest(), b.digest());
    }
}

#[test]
fn default_mode_updates_visual_encoder() {
    let (model, _, samples, _, _) = fixture(2);
    let c = cfg(Mode::Default, 4);
    let mut st = TrainState::new(model.clone(), base(&model), &c, None).unwrap();
    let before = st.merged().unwrap().with_prefix(IMAGE_ENCODER_PREFIX).digest();
    run_training(&mut st, &samples, None, &c, None).unwrap();
    assert_ne!(before, st.merged().unwrap().with_prefix(IMAGE_ENCODER_PREFIX).digest());
}

#[test]
fn frozen_projector_and_teacher_stay_fixed() {
    let (model, _, samples, cache, teacher) = fixture(2);
    let c = cfg(Mode::Align, 100);
    let mut st = TrainState::new(model, base(&tiny()), &c, Some(8)).unwrap();
    let proj_before = st.projector.as_ref().unwrap().params().digest();
    let teacher_before = teacher.digest();
    let cache_before = cache.to_bytes();
    run_training(&mut st, &samples, Some(&cache), &c, None).unwrap();
    assert_eq!(proj_before, st.projector.as_ref().unwrap().params().digest());
    assert_eq!(teacher_before, teacher.digest());
    assert_eq!(cache_before, cache.to_bytes());
}

#[test]
fn learnable_projector_moves() {
    let (model, _, samples, cache, _) = fixture(1);
    let c = TrainConfig {
        align: AlignConfig {
            projector: ProjectorSpec { frozen: false, ..ProjectorSpec::default() },
            ..AlignConfig::default()
        },
        ..cfg(Mode::Align, 3)
    };
    let mut st = TrainState::new(model, base(&tiny()), &c, Some(8)).unwrap();
    let before = st.projector.as_ref().unwrap().params().digest();
    run_training(&mut st, &samples, Some(&cache), &c, None).unwrap();
    assert_ne!(before, st.projector.as_ref().unwrap().params().digest());
}

#[test]
fn zero_lambda_reproduces_default_trajectory() {
    let (model, _, samples, cache, _) = fixture(2);
    let d = cfg(Mode::Default, 10);
    let a = TrainConfig {
        align: AlignConfig { lambda: 0.0, ..AlignConfig::default() },
        ..cfg(Mode::Align, 10)
    };
    let mut sd = TrainState::new(model.clone(), base(&model), &d, None).unwrap();
    let mut sa = TrainState::new(model.clone(), base(&model), &a, Some(8)).unwrap();
    let rd = run_training(&mut sd, &samples, None, &d, None).unwrap();
    let ra = run_training(&mut sa, &samples, Some(&cache), &a, None).unwrap();
    for (x, y) in rd.steps.iter().zip(&ra.steps) {
        assert_eq!(x.l_vla.to_bits(), y.l_vla.to_bits());
        assert_eq!(x.total.to_bits(), y.total.to_bits());
    }
    assert_eq!(sd.merged().unwrap().digest(), sa.merged().unwrap().digest());
}

#[test]
fn align_without_features_is_a_config_error() {
    let (model, _, samples, _, _) = fixture(1);
    let c = cfg(Mode::Align, 1);
    assert!(matches!(
        TrainState::new(model.clone(), base(&model), &c, None),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        finetune(&model, &base(&model), &samples, None, &c, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let (model, _, samples, cache, _) = fixture(1);
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(Mode::Align, 2);
    let p1 = dir.path().join("a.ckpt");
    let (st, rec) = finetune(&model, &base(&model), &samples, Some(&cache), &c, Some(&p1)).unwrap();
    assert_eq!(rec.final_checkpoint.as_deref(), Some("a.ckpt"));
    let loaded = read_checkpoint(&p1, Some(model.digest())).unwrap();
    assert_eq!(loaded.digest(), st.params().digest());
    let p2 = dir.path().join("b.ckpt");
    write_checkpoint(&p2, model.digest(), &loaded).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let (b, ad, proj) = split_params(&loaded);
    assert!(!b.is_empty() && !ad.is_empty() && !proj.is_empty());
    let merged = load_checkpoint(&p1, &model, c.adapter).unwrap();
    assert_eq!(merged.digest(), st.merged().unwrap().digest());
}

#[test]
fn checkpoint_for_other_width_is_incompatible() {
    let (model, _, _, _, _) = fixture(1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    let st = TrainState::new(model.clone(), base(&model), &cfg(Mode::Default, 1), None).unwrap();
    st.save_checkpoint(&p).unwrap();
    let wider = ModelConfig { width: 24, ..model };
    assert!(matches!(
        load_checkpoint(&p, &wider, AdapterSpec::default()),
        Err(Error::Compatibility(_))
    ));
}

#[test]
fn divergence_reports_step_and_writes_last_good() {
    let (model, _, samples, _, _) = fixture(1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.ckpt");
    let c = TrainConfig { lr: 1e300, clip_norm: 0.0, full_finetune: true, ..cfg(Mode::Default, 50) };
    let mut st = TrainState::new(model.clone(), base(&model), &c, None).unwrap();
    match run_training(&mut st, &samples, None, &c, Some(&p)) {
        Err(Error::Training { step, last_good, .. }) => {
            assert!(step >= 1);
            let lg = last_good.unwrap();
            assert_eq!(lg, last_good_path(&p));
            let saved = read_checkpoint(&lg, Some(model.digest())).unwrap();
            assert_eq!(saved.digest(), st.params().digest());
            assert!(st.params().iter().all(|(_, t)| t.is_finite()));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn batches_cover_every_sample_each_epoch() {
    let mut s = BatchSampler::new(7, 3);
    let mut seen: Vec<usize> = (0..7).flat_map(|_| s.next_batch(1)).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..7).collect::<Vec<_>>());
    let mut again = BatchSampler::new(7, 3);
    let mut s2 = BatchSampler::new(7, 3);
    assert_eq!(again.next_batch(20), s2.next_batch(20));
}

#[test]
fn pretraining_lowers_loss() {
    let (model, _, samples, _, _) = fixture(4);
    let c = TrainConfig { steps: 60, batch_size: 4, lr: 3e-3, optimizer: OptimizerKind::Adam, ..TrainConfig::default() };
    let b0 = init_params(&model, &mut Prng::new(c.seed, INIT_STREAM)).unwrap();
    let before = evaluate_loss(&model, &b0, &samples).unwrap();
    let (st, rec) = pretrain(&model, &samples, &c, None).unwrap();
    let after = evaluate_loss(&model, &st.base, &samples).unwrap();
    assert_eq!(rec.steps.len(), 60);
    assert!(after < 0.7 * before, "{before} -> {after}");
}

#[test]
fn single_batch_overfits() {
    let (model, _, samples, _, _) = fixture(1);
    let batch: Vec<&Sample> = samples.iter().take(2).collect();
    let c = TrainConfig {
        full_finetune: true,
        optimizer: OptimizerKind::Adam,
        lr: 1e-2,
        clip_norm: 0.0,
        ..cfg(Mode::Default, 0)
    };
    let mut st = TrainState::new(model.clone(), base(&model), &c, None).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..150 {
        last = st.train_step(&c, &batch, None).unwrap().l_vla;
    }
    assert!(last < 0.05, "{last}");
}

#[test]
fn run_record_csv_carries_hash() {
    let (model, _, samples, _, _) = fixture(1);
    let c = cfg(Mode::Default, 2);
    let mut st = TrainState::new(model.clone(), base(&model), &c, None).unwrap();
    let rec = run_training(&mut st, &samples, None, &c, None).unwrap();
    let csv = rec.losses_csv();
    assert!(csv.starts_with(&format!("# config_hash={}", rec.config_hash)));
    assert_eq!(csv.lines().count(), 4);
    let back: RunRecord = serde_json::from_str(&rec.to_json()).unwrap();
    assert_eq!(back, rec);
}
