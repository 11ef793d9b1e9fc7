//! Training loop, evaluation and gradient flow on the desk-scale model.

use coatnet_core::data::{make_batches, Sample, Split, Subset};
use coatnet_core::metrics::{average_precision, pr_curve};
use coatnet_core::model::Mode;
use coatnet_core::synthetic::quadrant_dataset;
use coatnet_core::taxonomy::LesionClass;
use coatnet_core::train::{evaluate, fit, ClassWeighting, TrainConfig};
use coatnet_core::{build_model, load_checkpoint, Graph, ModelConfig, Tensor};

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn seven_class_set(n: usize, seed: u64) -> Subset {
    let base = quadrant_dataset(n, 32, seed);
    let samples = base
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sample { image: s.image, label: i % 7 })
        .collect();
    Subset::new(Split::Test, samples)
}

#[test]
fn one_epoch_of_one_batch_logs_once() {
    let train = quadrant_dataset(8, 32, 0);
    let mut model = build_model(&ModelConfig::desk(2, 0)).unwrap();
    let out = fit(&mut model, &train, None, &config(1, 0)).unwrap();
    assert_eq!(out.log.epochs.len(), 1);
    assert_eq!(out.log.best_epoch, 1);
    assert!(out.log.epochs[0].val_loss.is_none());
    assert_eq!(out.best.meta.epoch, Some(1));
}

#[test]
fn same_seed_same_log_and_weights() {
    let train = quadrant_dataset(16, 32, 1);
    let val = {
        let mut v = quadrant_dataset(8, 32, 2);
        v.split = Split::Val;
        v
    };
    let run = || {
        let mut model = build_model(&ModelConfig::desk(2, 3)).unwrap();
        let cfg = TrainConfig {
            augmentation: Some(Default::default()),
            ..config(2, 5)
        };
        fit(&mut model, &train, Some(&val), &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.best.params(), b.best.params());
    assert!(a.log.epochs.iter().all(|e| e.val_loss.is_some()));
}

#[test]
fn initial_loss_is_near_uniform() {
    for (k, seed) in [(2, 0), (7, 1), (7, 2)] {
        let data = seven_class_set(16, seed);
        let labels: Vec<usize> = data.labels().iter().map(|l| l % k).collect();
        let model = build_model(&ModelConfig::desk(k, seed)).unwrap();
        let batch = &make_batches(&data, 16, None, None).unwrap()[0];
        let logits = model.logits(&batch.images).unwrap();
        let loss = coatnet_core::train::cross_entropy(&logits, &labels, None).unwrap();
        let expected = (k as f64).ln();
        assert!((loss - expected).abs() <= 0.2 * expected, "k={k}: {loss} vs {expected}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let data = quadrant_dataset(4, 32, 4);
    let model = build_model(&ModelConfig::desk(2, 4)).unwrap();
    let batch = &make_batches(&data, 4, None, None).unwrap()[0];
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &batch.images, Mode::Train).unwrap();
    let loss = g.cross_entropy(pass.logits, &batch.labels, None).unwrap();
    let grads = g.backward(loss).unwrap();
    for (p, &var) in model.params().iter().zip(&pass.params) {
        let grad = grads.get(var);
        assert_eq!(grad.shape(), p.tensor.shape());
        assert!(grad.values().iter().any(|v| *v != 0.0), "{} has zero gradient", p.name);
    }
}

#[test]
fn checkpoint_holds_the_best_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let train = quadrant_dataset(16, 32, 5);
    let mut model = build_model(&ModelConfig::desk(2, 5)).unwrap();
    let cfg = TrainConfig {
        checkpoint: Some(path.clone()),
        ..config(3, 5)
    };
    let out = fit(&mut model, &train, None, &cfg).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.meta.epoch, Some(out.log.best_epoch));
    let best_loss = out.log.epochs[out.log.best_epoch - 1].train_loss;
    assert!(out.log.epochs.iter().all(|e| e.train_loss >= best_loss));
    let x = &train.samples[0].image;
    let a = loaded.predict_proba(x).unwrap();
    let b = out.best.predict_proba(x).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() <= 1e-6));
}

#[test]
fn evaluation_decomposes_into_per_class_metrics() {
    let data = seven_class_set(21, 6);
    let model = build_model(&ModelConfig::desk(7, 6)).unwrap();
    let batches = make_batches(&data, 8, None, None).unwrap();
    let names = LesionClass::names();
    let eval = evaluate(&model, &batches, &names, false).unwrap();
    assert_eq!(eval.confusion.total(), 21);
    for c in 0..7 {
        let tp = eval.truth.iter().zip(&eval.predicted).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let support = eval.truth.iter().filter(|&&t| t == c).count() as f64;
        let called = eval.predicted.iter().filter(|&&p| p == c).count() as f64;
        let row = &eval.report.rows[c];
        assert_eq!(row.support as f64, support);
        assert_eq!(row.recall, tp / support);
        assert_eq!(row.precision, if called == 0.0 { 0.0 } else { tp / called });
        let scores: Vec<f64> = eval.scores.iter().map(|s| s[c]).collect();
        let positive: Vec<bool> = eval.truth.iter().map(|&t| t == c).collect();
        let ap = average_precision(&pr_curve("x", &scores, &positive).unwrap());
        assert_eq!(row.ap, ap);
    }
    for s in &eval.scores {
        assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn constant_predictor_metrics() {
    let data = seven_class_set(14, 7);
    let mut model = build_model(&ModelConfig::desk(7, 7)).unwrap();
    model.param_mut("head.weight").unwrap().values_mut().fill(0.0);
    model.param_mut("head.bias").unwrap().values_mut()[5] = 3.0;
    let batches = make_batches(&data, 7, None, None).unwrap();
    let eval = evaluate(&model, &batches, &LesionClass::names(), false).unwrap();
    assert!(eval.predicted.iter().all(|&p| p == 5));
    for (c, row) in eval.report.rows.iter().enumerate() {
        assert_eq!(row.recall, if c == 5 { 1.0 } else { 0.0 });
        // every sample ties, so AP is the class prevalence
        assert!((row.ap - 2.0 / 14.0).abs() <= 1e-12);
    }
    assert!((eval.report.rows[5].precision - 2.0 / 14.0).abs() <= 1e-12);
}

#[test]
fn grouped_evaluation_is_three_way() {
    let data = seven_class_set(14, 8);
    let model = build_model(&ModelConfig::desk(7, 8)).unwrap();
    let batches = make_batches(&data, 7, None, None).unwrap();
    let eval = evaluate(&model, &batches, &LesionClass::names(), true).unwrap();
    assert_eq!(eval.confusion.num_classes(), 3);
    assert_eq!(eval.confusion.classes(), ["melanoma", "non-melanoma-cancer", "benign"]);
    // 2 melanoma, 4 non-melanoma cancer, 8 benign
    let supports: Vec<u64> = eval.report.rows.iter().map(|r| r.support).collect();
    assert_eq!(supports, vec![2, 4, 8]);
    assert!(eval.scores.iter().all(|s| s.len() == 3 && (s.iter().sum::<f64>() - 1.0).abs() < 1e-12));

    let two_class = build_model(&ModelConfig::desk(2, 8)).unwrap();
    let names = vec!["a".to_string(), "b".to_string()];
    let binary = make_batches(&quadrant_dataset(4, 32, 0), 4, None, None).unwrap();
    assert!(evaluate(&two_class, &binary, &names, true).is_err());
}

#[test]
fn class_weighting_changes_training() {
    let mut train = quadrant_dataset(12, 32, 9);
    // unbalance: drop most of class 1
    train.samples.retain(|s| s.label == 0 || s.image.values()[0] < 0.1);
    let run = |w| {
        let mut model = build_model(&ModelConfig::desk(2, 9)).unwrap();
        let cfg = TrainConfig { class_weighting: w, ..config(1, 9) };
        fit(&mut model, &train, None, &cfg).unwrap().log.epochs[0].train_loss
    };
    assert_ne!(run(ClassWeighting::None), run(ClassWeighting::InverseFrequency));
}

#[test]
fn mismatched_input_is_rejected() {
    let model = build_model(&ModelConfig::desk(2, 0)).unwrap();
    let wrong = Tensor::zeros([1, 3, 16, 16]).unwrap();
    assert!(model.logits(&wrong).is_err());
}

#[test]
fn callback_can_stop_training_early() {
    use coatnet_core::train::fit_with;
    use std::ops::ControlFlow;
    let train = quadrant_dataset(8, 32, 10);
    let mut model = build_model(&ModelConfig::desk(2, 10)).unwrap();
    let mut seen = Vec::new();
    let out = fit_with(&mut model, &train, None, &config(5, 10), |e, _| {
        seen.push(e.epoch);
        if e.epoch == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(out.log.epochs.len(), 2);
}
