use super::*;
use crate::data::make_two_glyph;
use crate::transforms::TransformSpec;

const SHAPE: [usize; 3] = [8, 8, 1];

fn flow_cfg(spec: TransformSpec) -> FlowConfig {
    FlowConfig { transform: spec, layers: 2, hidden: 8, embed_widths: vec![4, 8], embed_dim: 8, ..FlowConfig::default() }
}

fn clf_cfg() -> ClassifierConfig {
    ClassifierConfig { widths: vec![4, 4] }
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(SHAPE.to_vec(), (0..64).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Models with non-zero biases so no unit sits exactly on a ReLU hinge and
/// a flow visibly away from the identity.
fn models(spec: TransformSpec, seed: u64) -> Models {
    let mut cfg = flow_cfg(spec);
    cfg.init_scale = 0.5;
    cfg.base_init_sigma = 0.5;
    let mut m = Models::new(&cfg, &clf_cfg(), SHAPE, 3, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for b in m.classifier.blocks.iter_mut().chain(m.flow.embedder.convs.iter_mut()) {
        b.bias.values_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
    }
    m
}

fn small_train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 8,
        classifier_lr: 1e-2,
        augmenter_lr: 1e-2,
        optimizer: OptimizerKind::adamw(),
        n_train_samples: 1,
        val_samples: 2,
        entropy: EntropyControl::Pid(PidConfig { target_entropy: -0.5, ..PidConfig::default() }),
        augment: Augment::Flow,
        freeze_classifier: false,
        seed: 7,
    }
}

fn glyphs() -> (Dataset, Dataset) {
    let ds = make_two_glyph(45.0, 12, 16, 3).unwrap();
    ds.split(8, 1)
}

fn glyph_models(seed: u64) -> Models {
    Models::new(&flow_cfg(TransformSpec::rotation(std::f64::consts::PI)), &clf_cfg(), [16, 16, 1], 2, seed).unwrap()
}

#[test]
fn classifier_shapes_and_probabilities() {
    let m = models(TransformSpec::rotation(1.0), 0);
    let p = m.classifier.probs(&image(0));
    assert_eq!(p.len(), 3);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(Classifier::new(&ClassifierConfig { widths: vec![4; 4] }, SHAPE, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn sampled_loss_bounds_loss_of_the_average() {
    // −mean log p ≥ −log mean p for the same draws.
    let m = models(TransformSpec::lie6(0.5), 1);
    for seed in 0..5 {
        let img = image(seed);
        let label = seed as usize % 3;
        let g = Graph::new();
        let ce = classifier_loss(&g, &m, &[(&img, label)], 6, &Augment::Flow, &mut ChaCha8Rng::seed_from_u64(seed)).item();
        let e = m.flow.embed(&img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<FlowSample> = (0..6).map(|_| m.flow.sample(&e, &mut rng, SampleMode::Train)).collect();
        let probs: Vec<f64> = draws.iter().map(|s| m.classifier.probs(&m.warp_value(&img, s))[label]).collect();
        let direct = -probs.iter().map(|p| p.ln()).sum::<f64>() / 6.0;
        let of_mean = -(probs.iter().sum::<f64>() / 6.0).ln();
        assert!((ce - direct).abs() < 1e-10, "{ce} vs {direct}");
        assert!(ce >= of_mean - 1e-12, "{ce} < {of_mean}");
    }
}

#[test]
fn constant_classifier_gives_log_k_and_no_flow_gradient() {
    let mut m = models(TransformSpec::rotation(1.0), 2);
    m.classifier.head.weight.values_mut().fill(0.0);
    m.classifier.head.bias.values_mut().fill(0.0);
    let imgs = [image(1), image(2)];
    let batch = [(&imgs[0], 0), (&imgs[1], 2)];
    let g = Graph::new();
    let (ce, total, logps) = augmenter_loss(&g, &m, &batch, 3, 0.0, &Augment::Flow, &mut ChaCha8Rng::seed_from_u64(0));
    assert!((ce.item() - 3f64.ln()).abs() < 1e-12);
    assert_eq!(logps.len(), 6);
    let grads = g.backward(total).unwrap();
    for p in m.flow.params() {
        if let Some(d) = grads.of(p) {
            assert!(d.iter().all(|v| v.abs() < 1e-14));
        }
    }

    let g = Graph::new();
    let (_, total, logps) = augmenter_loss(&g, &m, &batch, 3, 0.3, &Augment::Flow, &mut ChaCha8Rng::seed_from_u64(0));
    let expect = 3f64.ln() + 0.3 * logps.iter().sum::<f64>() / 6.0;
    assert!((total.item() - expect).abs() < 1e-12);
}

#[test]
fn augmenter_loss_gradient_matches_finite_differences() {
    let m = models(TransformSpec::lie6(0.4), 3);
    let imgs = [image(3), image(4)];
    let loss_at = |m: &Models| {
        let g = Graph::new();
        let batch = [(&imgs[0], 1), (&imgs[1], 0)];
        augmenter_loss(&g, m, &batch, 2, 0.2, &Augment::Flow, &mut ChaCha8Rng::seed_from_u64(11)).1.item()
    };
    let g = Graph::new();
    let batch = [(&imgs[0], 1), (&imgs[1], 0)];
    let (_, total, _) = augmenter_loss(&g, &m, &batch, 2, 0.2, &Augment::Flow, &mut ChaCha8Rng::seed_from_u64(11));
    let grads = g.backward(total).unwrap();
    let analytic: Vec<Vec<f64>> = m.flow.params().iter().chain(m.classifier.params().iter()).map(|p| grads.of(p).unwrap().to_vec()).collect();
    let (h, mut worst) = (1e-6, 0.0f64);
    let n_flow = m.flow.params().len();
    let total_params = n_flow + m.classifier.params().len();
    for pi in 0..total_params {
        for j in [0usize, 3, 7] {
            let perturbed = |delta: f64| {
                let mut m2 = m.clone();
                let mut ps: Vec<&mut Tensor> = m2.flow.params_mut();
                ps.extend(m2.classifier.params_mut());
                let p = &mut ps[pi];
                if j >= p.len() {
                    return None;
                }
                p.values_mut()[j] += delta;
                Some(loss_at(&m2))
            };
            let (Some(up), Some(down)) = (perturbed(h), perturbed(-h)) else { continue };
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            worst = worst.max((fd - a).abs() / (fd.abs() + a.abs()).max(1e-4));
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn pid_holds_alpha_at_target() {
    let mut pid = PidState::new(PidConfig { initial_alpha: 0.3, ..PidConfig::default() });
    for _ in 0..100 {
        pid.update(2.0);
    }
    assert!((pid.alpha - 0.3).abs() < 1e-12 && (pid.alpha_raw - 0.3).abs() < 1e-12);
}

#[test]
fn pure_integral_increments_by_ki_times_error() {
    let mut pid = PidState::new(PidConfig { kp: 0.0, ki: 0.05, kd: 0.0, windup: 100.0, ..PidConfig::default() });
    let mut last = pid.alpha_raw;
    for _ in 0..20 {
        pid.update(1.5);
        assert!((pid.alpha_raw - last - 0.05 * 0.5).abs() < 1e-12);
        last = pid.alpha_raw;
    }
}

#[test]
fn pid_output_is_non_negative_and_clamped() {
    let mut pid = PidState::new(PidConfig { windup: 0.2, ..PidConfig::default() });
    for _ in 0..1000 {
        pid.update(10.0);
        assert!(pid.alpha >= 0.0);
    }
    assert_eq!(pid.alpha_raw, -0.2);
    assert_eq!(pid.alpha, 0.0);
    for _ in 0..1000 {
        pid.update(-10.0);
    }
    assert!((pid.alpha_raw - 0.2).abs() < 1e-12);
}

#[test]
fn pid_step_response_settles_on_a_simulated_plant() {
    // First-order plant whose steady-state entropy rises with alpha.
    let steady = |a: f64| 0.5 + 3.0 * a / (a + 0.2);
    let mut pid = PidState::new(PidConfig::default());
    let mut h = 0.5;
    let mut settled_at = None;
    for step in 0..2000 {
        let a = pid.update(h + 0.02 * ((step as f64) * 1.7).sin());
        h += 0.05 * (steady(a) - h);
        let inside = (h - 2.0).abs() <= 0.1;
        match (inside, settled_at) {
            (true, None) => settled_at = Some(step),
            (false, Some(_)) => settled_at = None,
            _ => {}
        }
    }
    let at = settled_at.expect("never settled within ±0.1 of the target");
    assert!(at < 2000);
    assert!((h - 2.0).abs() <= 0.1);
}

#[test]
fn averaged_prediction_matches_grid_average() {
    let m = models(TransformSpec::rotation(1.0), 4);
    let img = image(9);
    let grid = classify_grid(&m, &img, 360).unwrap();
    let mc = classify_averaged(&m, &img, 20_000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (a, b) in grid.iter().zip(&mc) {
        assert!((a - b).abs() < 0.01, "{grid:?} vs {mc:?}");
    }
    assert!((grid.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(classify_grid(&models(TransformSpec::lie6(1.0), 0), &img, 10).is_err());
}

#[test]
fn rejection_sampling_accepts_inside_the_unit_ball() {
    let m = models(TransformSpec::lie6(1.0), 5);
    let s = tta_rejection_sample(&m.flow, &image(0), 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(s.len(), 20);
    assert!(s.iter().all(|s| s.t.norm() < 1.0));
    let p = predict_tta(&m, &image(0), 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn degenerate_flow_is_reported() {
    let mut cfg = flow_cfg(TransformSpec::lie6(1.0));
    cfg.base_init_sigma = 200.0;
    let m = Models::new(&cfg, &clf_cfg(), SHAPE, 3, 0).unwrap();
    let err = tta_rejection_sample(&m.flow, &image(0), 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, TrainError::Degenerate { draws: 300 }), "{err}");
}

#[test]
fn warmup_leaves_the_flow_bitwise_untouched() {
    let (train, val) = glyphs();
    let start = glyph_models(0);
    let cfg = TrainConfig { epochs: 2, warmup_epochs: 2, ..small_train_cfg() };
    let out = fit_models(start.clone(), &train, &val, &cfg).unwrap();
    assert_eq!(out.models.flow, start.flow);
    assert_ne!(out.models.classifier, start.classifier);
    assert!(out.history.iter().all(|h| h.entropy.is_nan()));
    assert!(out.entropy_trace.is_empty());
}

#[test]
fn frozen_classifier_stays_put_while_the_flow_learns() {
    let (train, val) = glyphs();
    let start = glyph_models(1);
    let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, freeze_classifier: true, ..small_train_cfg() };
    let out = fit_models(start.clone(), &train, &val, &cfg).unwrap();
    assert_eq!(out.models.classifier, start.classifier);
    assert_ne!(out.models.flow, start.flow);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let (train, val) = glyphs();
    let cfg = small_train_cfg();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| fit(&train, &val, &flow_cfg(TransformSpec::rotation(std::f64::consts::PI)), &clf_cfg(), &cfg).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.models, b.models);
    assert_eq!(format!("{:?}", a.history), format!("{:?}", b.history));
    assert_eq!(a.history.len(), 3);
    assert!(a.history[1].entropy.is_finite());
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let (train, val) = glyphs();
    let mut m = glyph_models(2);
    m.classifier.head.bias.values_mut()[0] = f64::INFINITY;
    let err = fit_models(m, &train, &val, &small_train_cfg()).unwrap_err();
    let TrainError::NonFinite(dump) = &err else { panic!("{err}") };
    assert_eq!((dump.epoch, dump.step), (0, 0));
    assert!(err.to_string().contains("classifier_param_norm"));
}

#[test]
fn config_validation() {
    let ok = small_train_cfg();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { warmup_epochs: 5, ..ok.clone() },
        TrainConfig { n_train_samples: 0, ..ok.clone() },
        TrainConfig { entropy: EntropyControl::Fixed { alpha: -1.0 }, ..ok.clone() },
        TrainConfig { entropy: EntropyControl::Pid(PidConfig { smoothing: 1.0, ..PidConfig::default() }), ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
}

#[test]
fn metrics_csv_has_the_expected_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let row = EpochMetrics { epoch: 0, train_loss: 0.5, aug_loss: 0.25, entropy: 1.0, alpha: 0.1, val_acc: 0.75 };
    write_metrics_csv(&path, &[row]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "epoch,train_loss,aug_loss,entropy,alpha,val_acc\n0,0.5,0.25,1,0.1,0.75\n");
}

fn sample_of(raw: Vec<f64>) -> FlowSample {
    let spec = TransformSpec::translation(1.0);
    FlowSample { t: spec.params(raw).unwrap(), logp: 0.0, tanh_log_det: 0.0 }
}

#[test]
fn rejection_boundary_cases() {
    let (ok, draws) = rejection_sample(|| sample_of(vec![0.0, 0.0]), 3).unwrap();
    assert_eq!((ok.len(), draws), (3, 3));
    let err = rejection_sample(|| sample_of(vec![0.9, 0.9]), 2).unwrap_err();
    assert!(matches!(err, TrainError::Degenerate { draws: 200 }));
    // A partial harvest at the cap is returned as is.
    let mut flip = false;
    let (ok, draws) = rejection_sample(
        || {
            flip = !flip;
            sample_of(if flip && ok_once() { vec![0.1, 0.0] } else { vec![0.9, 0.9] })
        },
        5,
    )
    .unwrap();
    assert_eq!((ok.len(), draws), (1, 500));
}

fn ok_once() -> bool {
    use std::sync::atomic::{AtomicBool, Ordering};
    static DONE: AtomicBool = AtomicBool::new(false);
    !DONE.swap(true, Ordering::SeqCst)
}

#[test]
fn uniform_square_acceptance_rate_is_the_disc_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (ok, draws) = rejection_sample(|| sample_of(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]), 7_854).unwrap();
    let rate = ok.len() as f64 / draws as f64;
    assert!(draws > 9_000 && draws < 11_000);
    assert!((rate - std::f64::consts::FRAC_PI_4).abs() < 0.02, "{rate}");
}

#[test]
fn loss_closed_forms() {
    let mut m = models(TransformSpec::rotation(1.0), 6);
    let imgs = [image(1), image(2), image(3)];
    let batch = [(&imgs[0], 1), (&imgs[1], 1), (&imgs[2], 1)];
    // Uniform over ten classes.
    let mut ten = Models::new(&flow_cfg(TransformSpec::rotation(1.0)), &clf_cfg(), SHAPE, 10, 0).unwrap();
    ten.classifier.head.weight.values_mut().fill(0.0);
    let g = Graph::new();
    let ce = classifier_loss(&g, &ten, &batch, 2, &Augment::Flow, &mut ChaCha8Rng::seed_from_u64(0)).item();
    assert!((ce - 10f64.ln()).abs() < 1e-12 && (ce - 2.302585).abs() < 1e-6);
    // Certain of the true class.
    m.classifier.head.weight.values_mut().fill(0.0);
    m.classifier.head.bias.values_mut().copy_from_slice(&[-800.0, 0.0, -800.0]);
    let g = Graph::new();
    assert_eq!(classifier_loss(&g, &m, &batch, 2, &Augment::Flow, &mut ChaCha8Rng::seed_from_u64(0)).item(), 0.0);
}

#[test]
fn loss_equals_two_loop_mean_and_alpha_zero_is_plain() {
    let m = models(TransformSpec::lie6(0.5), 7);
    let imgs = [image(4), image(5)];
    let batch = [(&imgs[0], 2), (&imgs[1], 0)];
    let g = Graph::new();
    let (ce, total, _) = augmenter_loss(&g, &m, &batch, 3, 0.0, &Augment::Flow, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(ce.item(), total.item());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut acc = 0.0;
    for (img, label) in batch {
        let e = m.flow.embed(img).unwrap();
        for _ in 0..3 {
            let s = m.flow.sample(&e, &mut rng, SampleMode::Train);
            acc += -m.classifier.probs(&m.warp_value(img, &s))[label].ln();
        }
    }
    assert!((ce.item() - acc / 6.0).abs() < 1e-12);
}

#[test]
fn averaging_degenerate_cases() {
    let mut m = models(TransformSpec::lie6(0.5), 8);
    let img = image(6);
    let single = classify_averaged(&m, &img, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let e = m.flow.embed(&img).unwrap();
    let s = m.flow.sample(&e, &mut ChaCha8Rng::seed_from_u64(1), SampleMode::Eval);
    assert_eq!(single, m.classifier.probs(&m.warp_value(&img, &s)));
    assert!(matches!(classify_averaged(&m, &img, 0, &mut ChaCha8Rng::seed_from_u64(1)), Err(TrainError::NoSamples)));
    m.classifier.head.weight.values_mut().fill(0.0);
    m.classifier.head.bias.values_mut().copy_from_slice(&[0.5, -0.2, 0.1]);
    let constant = m.classifier.probs(&img);
    for n in [1, 7] {
        let p = classify_averaged(&m, &img, n, &mut ChaCha8Rng::seed_from_u64(n as u64)).unwrap();
        for (a, b) in p.iter().zip(&constant) {
            assert!((a - b).abs() < 1e-12);
            assert!(*a >= 0.0);
        }
    }
}

#[test]
fn strong_entropy_reward_raises_entropy_under_a_blind_classifier() {
    let (train, val) = glyphs();
    let narrow = FlowConfig { base_init_sigma: 0.1, ..flow_cfg(TransformSpec::rotation(std::f64::consts::PI)) };
    let mut m = Models::new(&narrow, &clf_cfg(), [16, 16, 1], 2, 3).unwrap();
    m.classifier.head.weight.values_mut().fill(0.0);
    let cfg = TrainConfig {
        epochs: 12,
        warmup_epochs: 0,
        batch_size: 4,
        n_train_samples: 8,
        augmenter_lr: 0.05,
        freeze_classifier: true,
        entropy: EntropyControl::Fixed { alpha: 1.0 },
        val_samples: 0,
        ..small_train_cfg()
    };
    let out = fit_models(m, &train, &val, &cfg).unwrap();
    let trace = &out.entropy_trace;
    let checkpoints: Vec<f64> = trace.iter().skip(4).step_by(4).copied().collect();
    assert!(checkpoints.len() >= 4);
    assert!(checkpoints.windows(2).all(|w| w[1] > w[0]), "{checkpoints:?}");
}
