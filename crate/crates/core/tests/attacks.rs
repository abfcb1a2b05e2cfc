use proptest::prelude::*;
use rand::Rng;
use spt_core::attack::{adversarial_train, attack_dataset, fgsm, pgd, GradientAttack, PerturbationConfig};
use spt_core::data::{one_hot, Dataset, DatasetName, Split};
use spt_core::eval::check_structure_preserved;
use spt_core::model::{ArchitectureId, ClassifierModel, TrainConfig};
use spt_core::{rng, Tensor};

fn images(n: usize, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let data = (0..n * 784)
        .map(|_| if r.random_bool(0.5) { 0.0 } else { r.random::<f64>() })
        .collect();
    Tensor::new(&[n, 1, 28, 28], data).unwrap()
}

fn within_ball(adv: &Tensor, orig: &Tensor, eps: f64) -> bool {
    adv.data()
        .iter()
        .zip(orig.data())
        .all(|(&a, &o)| (a - o).abs() <= eps + 1e-12 && (0.0..=1.0).contains(&a))
}

fn model() -> ClassifierModel {
    ClassifierModel::build(ArchitectureId::Ca3, 21)
}

#[test]
fn fgsm_is_one_pgd_step() {
    let m = model();
    let x = images(3, 1);
    let y = one_hot(&[1, 4, 7]);
    let a = fgsm(&m, &x, &y, 0.3).unwrap();
    let b = pgd(&m, &x, &y, &PerturbationConfig::fgsm(0.3)).unwrap();
    assert_eq!(a, b);
    assert!(within_ball(&a, &x, 0.3));
}

#[test]
fn zero_budget_is_identity() {
    let m = model();
    let x = images(2, 2);
    let y = one_hot(&[0, 9]);
    assert_eq!(fgsm(&m, &x, &y, 0.0).unwrap(), x);
    let cfg = PerturbationConfig { epsilon: 0.0, step_size: 0.0, ..PerturbationConfig::pgd_eval(3) };
    assert_eq!(pgd(&m, &x, &y, &cfg).unwrap(), x);
}

#[test]
fn pgd_is_seeded() {
    let m = model();
    let x = images(2, 3);
    let y = one_hot(&[2, 5]);
    let cfg = PerturbationConfig { iterations: 3, ..PerturbationConfig::pgd_eval(4) };
    let a = pgd(&m, &x, &y, &cfg).unwrap();
    assert_eq!(a, pgd(&m, &x, &y, &cfg).unwrap());
    let other = PerturbationConfig { seed: 5, ..cfg };
    assert_ne!(a, pgd(&m, &x, &y, &other).unwrap());
}

#[test]
fn pgd_raises_the_loss() {
    let m = model();
    let x = images(4, 4);
    let y = one_hot(&[0, 1, 2, 3]);
    let (clean, _) = m.input_gradient(&x, &y).unwrap();
    let adv = pgd(&m, &x, &y, &PerturbationConfig { iterations: 5, ..PerturbationConfig::pgd_eval(1) }).unwrap();
    let (attacked, _) = m.input_gradient(&adv, &y).unwrap();
    assert!(attacked > clean, "{clean} -> {attacked}");
}

#[test]
fn fgsm_breaks_structure_patterns() {
    let m = model();
    let x = images(4, 5);
    let y = one_hot(&[3, 3, 8, 1]);
    let adv = fgsm(&m, &x, &y, 0.1).unwrap();
    assert!(!check_structure_preserved(&x, &adv).unwrap().passed());
}

#[test]
fn rejects_bad_budgets() {
    let m = model();
    let x = images(1, 6);
    let y = one_hot(&[0]);
    assert!(fgsm(&m, &x, &y, 1.5).is_err());
    assert!(fgsm(&m, &x, &y, -0.1).is_err());
    let cfg = PerturbationConfig { step_size: 0.4, ..PerturbationConfig::pgd_eval(0) };
    assert!(pgd(&m, &x, &y, &cfg).is_err());
    assert!(fgsm(&m, &x, &one_hot(&[0, 1]), 0.1).is_err());
}

#[test]
fn dataset_attack_is_batch_independent_for_fgsm() {
    let m = model();
    let ds = Dataset::new(DatasetName::Mnist, Split::Test, images(6, 7), vec![0, 1, 2, 3, 4, 5]).unwrap();
    let whole = attack_dataset(&m, &ds, GradientAttack::Fgsm { epsilon: 0.2 }, 6).unwrap();
    let split = attack_dataset(&m, &ds, GradientAttack::Fgsm { epsilon: 0.2 }, 4).unwrap();
    assert_eq!(whole, split);
    assert!(within_ball(&whole, ds.images(), 0.2));
}

#[test]
fn adversarial_training_runs_and_records_config() {
    let labels: Vec<u8> = (0..8).map(|i| i as u8).collect();
    let ds = Dataset::new(DatasetName::Mnist, Split::Train, images(8, 8), labels).unwrap();
    let cfg = PerturbationConfig { iterations: 2, ..PerturbationConfig::pgd_train(3) };
    let train = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    let mut steps = 0;
    let m = adversarial_train(ArchitectureId::Ca3, 1, &ds, &cfg, &train, &mut |_| steps += 1).unwrap();
    assert_eq!(steps, 2);
    assert_eq!(m.meta.adversarial, Some(cfg));
    assert_eq!(m.meta.epochs, 1);
    let again = adversarial_train(ArchitectureId::Ca3, 1, &ds, &cfg, &train, &mut |_| {}).unwrap();
    assert_eq!(m, again);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn outputs_stay_in_the_ball(eps in 0.0..=1.0f64, frac in 0.0..=1.0f64, iters in 1usize..4, seed in any::<u64>(), start in any::<bool>()) {
        let m = model();
        let x = images(2, seed);
        let y = one_hot(&[(seed % 10) as u8, 3]);
        let cfg = PerturbationConfig { epsilon: eps, step_size: eps * frac, iterations: iters, random_start: start, seed };
        let adv = pgd(&m, &x, &y, &cfg).unwrap();
        prop_assert!(within_ball(&adv, &x, eps));
        let adv = fgsm(&m, &x, &y, eps).unwrap();
        prop_assert!(within_ball(&adv, &x, eps));
    }
}
