use alloc::vec::Vec;

use super::classifier::ClassifierModel;
use crate::autodiff::Tape;
use crate::data::{argmax_rows, Dataset};
use crate::error::{usage_err, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Supervised training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub batches: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub batch_losses: Vec<f64>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of training examples classified correctly during the last
    /// epoch (measured on the batch before each update).
    pub last_epoch_accuracy: Option<f64>,
}

/// Adam state for every parameter tensor of one model.
pub struct Trainer {
    states: Vec<AdamState>,
}

pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

impl Trainer {
    pub fn new(model: &ClassifierModel, learning_rate: f64) -> Self {
        let config = AdamConfig::with_learning_rate(learning_rate);
        Self {
            states: model
                .params()
                .iter()
                .map(|p| AdamState::new(p.value.len(), config))
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.states.first().map_or(0, AdamState::steps)
    }

    /// One cross-entropy Adam step on a batch.
    pub fn step(&mut self, model: &mut ClassifierModel, images: &Tensor, onehot: &Tensor) -> Result<StepOutcome> {
        let (loss, correct, grads) = {
            let mut tape = Tape::new();
            let x = tape.leaf_ref(images, false);
            let out = model.forward(&mut tape, x, true)?;
            let loss = tape.softmax_cross_entropy(out.logits, onehot)?;
            tape.backward(loss)?;
            let predicted = argmax_rows(tape.value(out.logits));
            let truth = argmax_rows(onehot);
            let correct = predicted.iter().zip(&truth).filter(|(a, b)| a == b).count();
            let value = tape.value(loss).data()[0];
            let grads: Vec<Vec<f64>> = out
                .params
                .iter()
                .map(|&v| tape.take_grad(v).expect("trainable parameter gradient"))
                .collect();
            (value, correct, grads)
        };
        for ((state, param), grad) in self.states.iter_mut().zip(model.params_mut()).zip(&grads) {
            state.step(param.value.data_mut(), grad)?;
        }
        Ok(StepOutcome { loss, correct })
    }
}

/// Minimizes cross-entropy with Adam over shuffled mini-batches.
///
/// Deterministic given `cfg.seed` and the initial model; `epochs = 0`
/// leaves the model untouched.
pub fn train_classifier(
    model: &mut ClassifierModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(Progress),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(usage_err!("cannot train on an empty dataset"));
    }
    let mut trainer = Trainer::new(model, cfg.learning_rate);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let batches = dataset.batches(cfg.batch_size, Some(derive_seed(cfg.seed, epoch as u64)))?;
        let count = batches.len();
        let (mut total, mut correct) = (0.0, 0);
        for (i, batch) in batches.enumerate() {
            let out = trainer.step(model, &batch.images, &batch.onehot)?;
            total += out.loss;
            correct += out.correct;
            report.batch_losses.push(out.loss);
            progress(Progress {
                epoch,
                batch: i,
                batches: count,
                loss: out.loss,
            });
        }
        report.epoch_losses.push(total / count as f64);
        report.last_epoch_accuracy = Some(correct as f64 / dataset.len() as f64);
    }
    model.meta.epochs += cfg.epochs as u32;
    Ok(report)
}
