use taillab::datagen::{BenchmarkSpec, LabeledDataset, NoiseKind};
use taillab::net::{Classifier, Layer};
use taillab::trainer::{ensemble_predict, run_experiment, Phase, RunRecord, TrainConfig, Trainer, Variant};
use taillab::{Error, Matrix};

fn clean_balanced(seed: u64) -> (LabeledDataset, LabeledDataset) {
    BenchmarkSpec {
        num_classes: 4,
        dim: 8,
        base_count: 120,
        imbalance_ratio: 1.0,
        noise: NoiseKind::Symmetric { rate: 0.0 },
        test_per_class: 50,
        seed,
        ..BenchmarkSpec::default()
    }
    .build()
    .unwrap()
}

fn small(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_total: 24,
        warmup_epochs: 4,
        bias_epochs: Some(16),
        hidden_layers: vec![32],
        variant,
        seed,
        ..TrainConfig::default()
    }
}

/// A model whose output ignores the input: softmax(logits) for every row.
fn constant_model(dim: usize, logits: &[f64]) -> Classifier {
    Classifier::from_layers(vec![Layer {
        weights: Matrix::zeros(logits.len(), dim),
        bias: logits.to_vec(),
    }])
    .unwrap()
}

#[test]
fn erm_separates_clean_blobs() {
    let (train, test) = clean_balanced(1);
    let out = run_experiment(&small(Variant::Erm, 1), &train, &test).unwrap();
    let last = out.record.last_accuracy.unwrap();
    assert!(last >= 0.95, "{last}");
    assert!(out.record.epochs.iter().all(|e| e.phase == Phase::Erm));
}

#[test]
fn full_method_matches_erm_without_noise_or_imbalance() {
    let (train, test) = clean_balanced(2);
    let erm = run_experiment(&small(Variant::Erm, 2), &train, &test).unwrap().record;
    let ssbl = run_experiment(&small(Variant::Ssbl, 2), &train, &test).unwrap().record;
    let gap = (ssbl.last_accuracy.unwrap() - erm.last_accuracy.unwrap()).abs();
    assert!(gap <= 0.02, "ssbl {:?} erm {:?}", ssbl.last_accuracy, erm.last_accuracy);
}

#[test]
fn best_accuracy_bounds_last() {
    let spec = BenchmarkSpec {
        num_classes: 5,
        dim: 6,
        base_count: 150,
        imbalance_ratio: 10.0,
        test_per_class: 40,
        seed: 3,
        ..BenchmarkSpec::default()
    };
    let (train, test) = spec.build().unwrap();
    for variant in [Variant::Ssbl, Variant::Erm] {
        let r = run_experiment(&small(variant, 3), &train, &test).unwrap().record;
        assert!(r.best_accuracy.unwrap() >= r.last_accuracy.unwrap());
        assert!(r.best_balanced_accuracy.unwrap() >= r.last_balanced_accuracy.unwrap());
        assert_eq!(r.epochs.len(), 24);
        assert_eq!(r.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), (0..24).collect::<Vec<_>>());
    }
}

#[test]
fn phases_follow_the_schedule() {
    let (train, test) = clean_balanced(4);
    let r = run_experiment(&small(Variant::Ssbl, 4), &train, &test).unwrap().record;
    for e in &r.epochs {
        let expected = match e.epoch {
            0..=3 => Phase::Warmup,
            4..=15 => Phase::BiasEstimation,
            _ => Phase::Main,
        };
        assert_eq!(e.phase, expected, "epoch {}", e.epoch);
        if e.phase != Phase::Warmup {
            assert_eq!(e.num_clean.unwrap() + e.num_unlabeled.unwrap(), train.len());
        }
    }
    assert!(r.alpha_digest_first_main.is_some());
    assert_eq!(r.alpha_digest_first_main, r.alpha_digest_last_main);
    assert_eq!(
        r.alpha_digest_first_main.as_deref(),
        Some(r.coefficients.as_ref().unwrap().alpha_digest().as_str())
    );
    assert!(r.selection_comparison.is_some());
}

#[test]
fn ensemble_averages_probabilities() {
    let x = Matrix::zeros(3, 2);
    let a = constant_model(2, &[0.6f64.ln(), 0.4f64.ln()]);
    let b = constant_model(2, &[0.2f64.ln(), 0.8f64.ln()]);
    assert_eq!(ensemble_predict(&[a.clone()], &x).unwrap(), a.predict(&x).unwrap());
    assert_eq!(ensemble_predict(&[a.clone(), a.clone(), a.clone()], &x).unwrap(), vec![0; 3]);
    assert_eq!(ensemble_predict(&[a.clone(), b], &x).unwrap(), vec![1; 3]);
    assert!(ensemble_predict(&[], &x).is_err());
    assert!(ensemble_predict(&[a, constant_model(2, &[0.0; 3])], &x).is_err());
}

#[test]
fn a_model_biased_toward_one_class_is_detected() {
    let (train, _) = clean_balanced(5);
    let mut cfg = small(Variant::Ssbl, 5);
    cfg.optimizer.initial_lr = 0.0;
    cfg.epochs_total = 6;
    cfg.warmup_epochs = 2;
    cfg.bias_epochs = Some(4);
    let model = constant_model(train.dim(), &[3.0, 0.0, 0.0, 0.0]);
    let mut trainer = Trainer::with_model(&cfg, &train, None, model.clone()).unwrap();
    trainer.warmup().unwrap();
    let coeffs = trainer.bias_estimation_phase().unwrap();
    assert_eq!(trainer.model(), &model);
    for c in 1..4 {
        assert!(coeffs.ratio[(c, 0)] > 1.0, "R[{c},0] = {}", coeffs.ratio[(c, 0)]);
        assert!(coeffs.alpha[(c, 0)] > 1.0);
        assert!(coeffs.alpha[(0, c)] < 1.0);
    }
}

#[test]
fn empty_estimation_window_falls_back_to_uniform_weights() {
    let (train, test) = clean_balanced(6);
    let cfg = TrainConfig {
        bias_epochs: Some(4),
        ..small(Variant::Ssbl, 6)
    };
    let r = run_experiment(&cfg, &train, &test).unwrap().record;
    let alpha = &r.coefficients.unwrap().alpha;
    assert!(alpha.as_slice().iter().all(|&a| a == 1.0));
    assert!(r.warnings.iter().any(|w| w.contains("uniform")), "{:?}", r.warnings);
    assert!(r.bias_ema.is_none());
}

#[test]
fn variants_pick_their_coefficients() {
    let spec = BenchmarkSpec {
        num_classes: 3,
        dim: 4,
        base_count: 90,
        imbalance_ratio: 9.0,
        test_per_class: 20,
        seed: 7,
        ..BenchmarkSpec::default()
    };
    let (train, test) = spec.build().unwrap();
    let none = run_experiment(&small(Variant::NoRebalance, 7), &train, &test).unwrap().record;
    assert!(none.coefficients.unwrap().alpha.as_slice().iter().all(|&a| a == 1.0));
    let freq = run_experiment(&small(Variant::FreqRebalance, 7), &train, &test).unwrap().record;
    let expected = taillab::bias::frequency_alpha(&train.observed_counts, 3.0, 1.0).unwrap();
    assert_eq!(freq.coefficients.unwrap().alpha, expected);
    let erm = run_experiment(&small(Variant::Erm, 7), &train, &test).unwrap().record;
    assert!(erm.coefficients.is_none() && erm.alpha_digest_first_main.is_none());
}

#[test]
fn variant_overrides_are_applied() {
    let base = TrainConfig::default();
    let e = TrainConfig { variant: Variant::NoRegAll, ..base.clone() }.effective();
    assert_eq!((e.lambda_warm, e.lambda_reg), (0.0, 0.0));
    let e = TrainConfig { variant: Variant::NoRegWarmup, ..base.clone() }.effective();
    assert_eq!((e.lambda_warm, e.lambda_reg), (0.0, base.lambda_reg));
    let e = TrainConfig { variant: Variant::SingleGmm, ..base.clone() }.effective();
    assert_eq!(e.selection, taillab::cass::SelectionMode::SingleGmm);
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("bogus".parse::<Variant>().is_err());
}

#[test]
fn inconsistent_schedules_are_rejected() {
    let (train, test) = clean_balanced(8);
    for cfg in [
        TrainConfig { warmup_epochs: 10, bias_epochs: Some(5), ..small(Variant::Ssbl, 8) },
        TrainConfig { bias_epochs: Some(30), ..small(Variant::Ssbl, 8) },
        TrainConfig { batch_size: 0, ..small(Variant::Ssbl, 8) },
        TrainConfig { ema_sigma: 1.0, ..small(Variant::Ssbl, 8) },
    ] {
        assert!(matches!(run_experiment(&cfg, &train, &test), Err(Error::InvalidArgument(_))));
    }
}

#[test]
fn runs_are_reproducible_and_serializable() {
    let (train, test) = clean_balanced(9);
    let cfg = TrainConfig { epochs_total: 10, warmup_epochs: 2, bias_epochs: Some(6), ..small(Variant::Ssbl, 9) };
    let a = run_experiment(&cfg, &train, &test).unwrap();
    let b = run_experiment(&cfg, &train, &test).unwrap();
    assert_eq!(a.model, b.model);
    let json = a.record.to_json().unwrap();
    assert_eq!(json, b.record.to_json().unwrap());
    let back: RunRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    let other = run_experiment(&TrainConfig { seed: 10, ..cfg }, &train, &test).unwrap();
    assert_ne!(other.model, a.model);
}

#[test]
fn unit_weights_make_the_main_phase_an_estimation_phase() {
    let (train, test) = clean_balanced(11);
    let base = TrainConfig { epochs_total: 12, warmup_epochs: 2, ..small(Variant::NoRebalance, 11) };
    let split = run_experiment(&TrainConfig { bias_epochs: Some(6), ..base.clone() }, &train, &test).unwrap();
    let whole = run_experiment(&TrainConfig { bias_epochs: Some(12), ..base }, &train, &test).unwrap();
    let a = split.model.layers().iter().flat_map(|l| l.weights.as_slice().iter().chain(&l.bias));
    let b = whole.model.layers().iter().flat_map(|l| l.weights.as_slice().iter().chain(&l.bias));
    let worst = a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst:e}");
}
