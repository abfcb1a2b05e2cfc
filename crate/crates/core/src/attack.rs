//! L-infinity baseline attacks (FGSM, PGD) and PGD adversarial training.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::{check_unit_range, Dataset};
use crate::error::{dim_err, usage_err, Result};
use crate::model::{ArchitectureId, ClassifierModel, Progress, TrainConfig, Trainer};
use crate::rng;
use crate::tensor::Tensor;

/// Budget and schedule of a gradient-sign attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    /// L-infinity radius.
    pub epsilon: f64,
    /// Per-iteration step.
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl PerturbationConfig {
    /// Evaluation PGD: eps 0.3, step 0.01, 40 iterations, random start.
    pub fn pgd_eval(seed: u64) -> Self {
        Self {
            epsilon: 0.3,
            step_size: 0.01,
            iterations: 40,
            random_start: true,
            seed,
        }
    }

    /// Inner loop of adversarial training: as [`Self::pgd_eval`] with 7 iterations.
    pub fn pgd_train(seed: u64) -> Self {
        Self {
            iterations: 7,
            ..Self::pgd_eval(seed)
        }
    }

    /// Single full-budget step from the clean image.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon,
            iterations: 1,
            random_start: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(usage_err!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(self.step_size >= 0.0 && self.step_size <= self.epsilon) {
            return Err(usage_err!(
                "step size {} must lie in [0, epsilon = {}]",
                self.step_size,
                self.epsilon
            ));
        }
        if self.iterations == 0 {
            return Err(usage_err!("at least one iteration is required"));
        }
        Ok(())
    }
}

/// Sign with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_batch(images: &Tensor, onehot: &Tensor) -> Result<()> {
    check_unit_range(images)?;
    if onehot.shape() != [images.shape()[0], crate::NUM_CLASSES] {
        return Err(dim_err!(
            "{} images but label rows of shape {:?}",
            images.shape()[0],
            onehot.shape()
        ));
    }
    Ok(())
}

/// `clip(x + eps * sign(grad_x CE(f(x), y)), 0, 1)`.
pub fn fgsm(target: &ClassifierModel, images: &Tensor, onehot: &Tensor, epsilon: f64) -> Result<Tensor> {
    PerturbationConfig::fgsm(epsilon).validate()?;
    check_batch(images, onehot)?;
    let (_, grad) = target.input_gradient(images, onehot)?;
    let data = images
        .data()
        .iter()
        .zip(&grad)
        .map(|(&x, &g)| (x + epsilon * sign(g)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(images.shape(), data)
}

/// Projected gradient-sign ascent inside the eps-ball around `images`,
/// intersected with `[0, 1]`.
pub fn pgd(target: &ClassifierModel, images: &Tensor, onehot: &Tensor, cfg: &PerturbationConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(images, onehot)?;
    let eps = cfg.epsilon;
    let origin = images.data();
    let mut x: Vec<f64> = if cfg.random_start {
        let mut rng = rng::rng_for(cfg.seed, 0x9D);
        origin
            .iter()
            .map(|&v| (v + eps * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0))
            .collect()
    } else {
        origin.to_vec()
    };
    for _ in 0..cfg.iterations {
        let current = Tensor::new(images.shape(), x)?;
        let (_, grad) = target.input_gradient(&current, onehot)?;
        x = current.into_data();
        for ((xv, &g), &x0) in x.iter_mut().zip(&grad).zip(origin) {
            let stepped = *xv + cfg.step_size * sign(g);
            *xv = stepped.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
        }
    }
    Tensor::new(images.shape(), x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientAttack {
    Fgsm { epsilon: f64 },
    Pgd(PerturbationConfig),
}

/// Runs an attack over a whole dataset in batches.
///
/// PGD batches draw their random starts from `derive_seed(cfg.seed, batch)`,
/// so the result does not depend on how batches are scheduled.
pub fn attack_dataset(
    target: &ClassifierModel,
    dataset: &Dataset,
    attack: GradientAttack,
    batch_size: usize,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for (i, batch) in dataset.batches(batch_size, None)?.enumerate() {
        let adv = match attack {
            GradientAttack::Fgsm { epsilon } => fgsm(target, &batch.images, &batch.onehot, epsilon)?,
            GradientAttack::Pgd(cfg) => {
                let cfg = PerturbationConfig {
                    seed: rng::derive_seed(cfg.seed, i as u64),
                    ..cfg
                };
                pgd(target, &batch.images, &batch.onehot, &cfg)?
            }
        };
        parts.push(adv);
    }
    Tensor::concat_rows(&parts)
}

/// Trains a fresh model of architecture `id` on PGD adversarial batches.
///
/// Every mini-batch is replaced by its PGD counterpart, generated against
/// the current parameters, before the Adam step.
pub fn adversarial_train(
    id: ArchitectureId,
    init_seed: u64,
    dataset: &Dataset,
    cfg: &PerturbationConfig,
    train: &TrainConfig,
    progress: &mut dyn FnMut(Progress),
) -> Result<ClassifierModel> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(usage_err!("cannot train on an empty dataset"));
    }
    let mut model = ClassifierModel::build(id, init_seed);
    let mut trainer = Trainer::new(&model, train.learning_rate);
    for epoch in 0..train.epochs {
        let batches = dataset.batches(train.batch_size, Some(rng::derive_seed(train.seed, epoch as u64)))?;
        let count = batches.len();
        for (i, batch) in batches.enumerate() {
            let step_cfg = PerturbationConfig {
                seed: rng::derive_seed(cfg.seed, (epoch * count + i) as u64),
                ..*cfg
            };
            let adv = pgd(&model, &batch.images, &batch.onehot, &step_cfg)?;
            let out = trainer.step(&mut model, &adv, &batch.onehot)?;
            progress(Progress {
                epoch,
                batch: i,
                batches: count,
                loss: out.loss,
            });
        }
    }
    model.meta.epochs = train.epochs as u32;
    model.meta.adversarial = Some(*cfg);
    Ok(model)
}
