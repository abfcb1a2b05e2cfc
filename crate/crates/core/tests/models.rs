use rand::Rng;
use spt_core::data::{one_hot, Dataset, DatasetName, Split};
use spt_core::model::{ArchitectureId, ClassifierModel, TrainConfig, Trainer, train_classifier};
use spt_core::optim::{AdamConfig, AdamState};
use spt_core::{rng, Tensor};

#[test]
fn parameter_counts_are_frozen() {
    let expected = [
        (ArchitectureId::Cp, 3_274_634),
        (ArchitectureId::Ca0, 3_274_634),
        (ArchitectureId::Ca1, 3_272_330),
        (ArchitectureId::Ca2, 3_250_602),
        (ArchitectureId::Ca3, 6_953_802),
    ];
    for (id, count) in expected {
        assert_eq!(id.spec().param_count(), count, "{id}");
        assert_eq!(ClassifierModel::build(id, 0).param_count(), count, "{id}");
    }
}

#[test]
fn layer_listing() {
    assert_eq!(
        ArchitectureId::Cp.spec().to_string(),
        "Conv(32,5,5,1)/ReLU/MaxPool(2,2)/Conv(64,5,5,1)/ReLU/MaxPool(2,2)/FC(1024)/ReLU/FC(10)/Softmax"
    );
    assert_eq!(
        ArchitectureId::Ca3.spec().to_string(),
        "Conv(32,3,3,1)/ReLU/MaxPool(2,2)/FC(1024)/ReLU/FC(512)/ReLU/FC(10)/Softmax"
    );
}

#[test]
fn initialization_is_seeded_and_bounded() {
    let a = ClassifierModel::build(ArchitectureId::Cp, 11);
    let b = ClassifierModel::build(ArchitectureId::Cp, 11);
    let c = ClassifierModel::build(ArchitectureId::Cp, 12);
    let twin = ClassifierModel::build(ArchitectureId::Ca0, 11);
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
    // Same layers, different architecture tag: independent weights.
    assert_ne!(a.params()[0].value, twin.params()[0].value);
    for p in a.params() {
        if p.name.ends_with(".bias") {
            assert!(p.value.data().iter().all(|&v| v == 0.1));
        } else {
            assert!(p.value.data().iter().all(|v| v.abs() <= 0.2));
        }
    }
}

#[test]
fn predictions_are_distributions() {
    let model = ClassifierModel::build(ArchitectureId::Ca2, 1);
    let mut r = rng::rng(4);
    let images = Tensor::new(&[3, 1, 28, 28], (0..3 * 784).map(|_| r.random::<f64>()).collect()).unwrap();
    let probs = model.predict(&images).unwrap();
    assert_eq!(probs.shape(), [3, 10]);
    for row in probs.data().chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
    assert!(model.predict(&Tensor::zeros(&[1, 1, 27, 28])).is_err());
}

#[test]
fn each_architecture_fits_a_fixed_batch() {
    let mut r = rng::rng(5);
    let images = Tensor::new(&[8, 1, 28, 28], (0..8 * 784).map(|_| r.random::<f64>()).collect()).unwrap();
    let y = one_hot(&[0, 1, 2, 3, 4, 5, 6, 7]);
    for id in ArchitectureId::ALL {
        let mut model = ClassifierModel::build(id, 3);
        let mut trainer = Trainer::new(&model, 1e-3);
        let first = trainer.step(&mut model, &images, &y).unwrap().loss;
        let mut last = first;
        for _ in 1..20 {
            last = trainer.step(&mut model, &images, &y).unwrap().loss;
        }
        assert!(last < first, "{id}: {first} -> {last}");
    }
}

#[test]
fn training_is_deterministic() {
    let mut r = rng::rng(6);
    let images = Tensor::new(&[40, 1, 28, 28], (0..40 * 784).map(|_| r.random::<f64>()).collect()).unwrap();
    let labels: Vec<u8> = (0..40).map(|i| (i % 10) as u8).collect();
    let ds = Dataset::new(DatasetName::Mnist, Split::Train, images, labels).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = ClassifierModel::build(ArchitectureId::Ca3, 2);
        let report = train_classifier(&mut m, &ds, &cfg, &mut |_| {}).unwrap();
        (m, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    assert_eq!(r1.batch_losses.len(), 3);
    assert_eq!(m1.meta.epochs, 1);
}

/// Adam written out as the textbook scalar recurrence.
fn scripted_adam(mut w: f64, steps: usize, lr: f64, grad: impl Fn(f64) -> f64) -> f64 {
    let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for t in 1..=steps {
        let g = grad(w);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    w
}

#[test]
fn adam_matches_scripted_recurrence() {
    let grad = |w: f64| 2.0 * (w - 3.0);
    let mut state = AdamState::new(1, AdamConfig::with_learning_rate(0.1));
    let mut w = [0.0];
    for _ in 0..500 {
        let g = [grad(w[0])];
        state.step(&mut w, &g).unwrap();
    }
    let oracle = scripted_adam(0.0, 500, 0.1, grad);
    assert_eq!(w[0], oracle);
    assert!((w[0] - 3.0).abs() < 0.05);
    assert_eq!(state.steps(), 500);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut state = AdamState::new(3, AdamConfig::with_learning_rate(1e-3));
    let mut w = [1.0, -2.0, 0.5];
    state.step(&mut w, &[4.0, -0.01, 0.0]).unwrap();
    assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
    assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    assert_eq!(w[2], 0.5);
    assert!(state.step(&mut w, &[1.0]).is_err());
}
