//! Structure-preserving transformation (SPT).
//!
//! Every pixel value `x` in `[0, 1]` is mapped through the same learned
//! scalar function `g(x) = sigmoid(sum_i w_i * x^gamma_i)`. Because `g`
//! never looks at pixel coordinates, pixels that share a gray level before
//! the transform share one afterwards.
//!
//! Training places `g` in front of a frozen classifier and fits only the
//! weights `w` with Adam: the untargeted objective pushes predictions away
//! from the true label (negated cross-entropy), the targeted one pulls them
//! toward a chosen label. Both add `alpha * sum_i w_i^2`.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::data::{check_unit_range, one_hot, Dataset};
use crate::error::{usage_err, Error, Result};
use crate::model::ClassifierModel;
use crate::optim::{AdamConfig, AdamState};
use crate::rng;
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// Fixed exponents of the power-function basis.
pub const DEFAULT_GAMMAS: [f64; 11] = [0.04, 0.10, 0.20, 0.40, 0.67, 1.0, 1.5, 2.5, 5.0, 10.0, 25.0];
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Regularization strength used for MNIST.
pub const MNIST_ALPHA: f64 = 0.0;
/// Regularization strength used for Fashion-MNIST.
pub const FMNIST_ALPHA: f64 = 0.6;

/// Images transformed per tape when no gradient is needed.
const TRANSFORM_CHUNK: usize = 500;

/// How the trainable weights are drawn before training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// `scale * N(0, 1)` per weight.
    ScaledNormal { scale: f64 },
    Zeros,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::ScaledNormal { scale: 0.5 }
    }
}

impl InitScheme {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "zeros" {
            return Ok(Self::Zeros);
        }
        let scale = s
            .strip_prefix("scaled-normal:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| usage_err!("unknown init scheme {s:?}; expected zeros or scaled-normal:<scale>"))?;
        Ok(Self::ScaledNormal { scale })
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::ScaledNormal { scale } => write!(f, "scaled-normal:{scale}"),
            InitScheme::Zeros => f.write_str("zeros"),
        }
    }
}

/// Attack state: fixed exponents, trainable weights and the penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SptParams {
    pub gammas: Vec<f64>,
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub init_seed: u64,
    pub init_scheme: InitScheme,
}

impl SptParams {
    pub fn init(gammas: &[f64], alpha: f64, scheme: InitScheme, seed: u64) -> Result<Self> {
        let mut rng = rng::rng_for(seed, 0x5B7);
        let weights = match scheme {
            InitScheme::ScaledNormal { scale } => gammas
                .iter()
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            InitScheme::Zeros => alloc::vec![0.0; gammas.len()],
        };
        Self::from_parts(gammas.to_vec(), weights, alpha, seed, scheme)
    }

    /// Default exponents and init scheme.
    pub fn with_defaults(alpha: f64, seed: u64) -> Self {
        Self::init(&DEFAULT_GAMMAS, alpha, InitScheme::default(), seed).expect("valid defaults")
    }

    pub fn from_parts(
        gammas: Vec<f64>,
        weights: Vec<f64>,
        alpha: f64,
        init_seed: u64,
        init_scheme: InitScheme,
    ) -> Result<Self> {
        if gammas.is_empty() || gammas.len() != weights.len() {
            return Err(Error::Validation(alloc::format!(
                "{} exponents but {} weights",
                gammas.len(),
                weights.len()
            )));
        }
        if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Validation("exponents must be finite and non-negative".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("weights must be finite".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Validation(alloc::format!("alpha must be non-negative, got {alpha}")));
        }
        Ok(Self {
            gammas,
            weights,
            alpha,
            init_seed,
            init_scheme,
        })
    }

    pub fn penalty(&self) -> f64 {
        self.alpha * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    fn weight_tensor(&self) -> Tensor {
        Tensor::new(&[self.weights.len()], self.weights.clone()).expect("non-empty weights")
    }

    /// Records `g(images)` on a tape with the weights as a leaf.
    fn record<'t>(&self, tape: &mut Tape<'t>, images: Var, trainable: bool) -> Result<(Var, Var)> {
        let w = tape.leaf(self.weight_tensor(), trainable);
        let terms = self
            .gammas
            .iter()
            .map(|&g| tape.power(images, g))
            .collect::<Result<Vec<_>>>()?;
        let mixed = tape.weighted_sum(w, &terms)?;
        Ok((tape.sigmoid(mixed)?, w))
    }
}

/// Applies the gray-level transform pixel by pixel.
///
/// Output is in `(0, 1)` whenever `|sum_i w_i x^gamma_i| < 36`; beyond that
/// the sigmoid rounds to an endpoint in `f64`.
pub fn transform(params: &SptParams, images: &Tensor) -> Result<Tensor> {
    check_unit_range(images)?;
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(TRANSFORM_CHUNK) {
        let end = (start + TRANSFORM_CHUNK).min(n);
        let chunk = if start == 0 && end == n {
            images.clone()
        } else {
            images.slice_rows(start, end)?
        };
        let mut tape = Tape::new();
        let x = tape.leaf(chunk, false);
        let (out, _) = params.record(&mut tape, x, false)?;
        parts.push(tape.value(out).clone());
    }
    Tensor::concat_rows(&parts)
}

/// Produces adversarial images from trained parameters. Needs no model.
pub fn generate(params: &SptParams, images: &Tensor) -> Result<Tensor> {
    transform(params, images)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Untargeted,
    Targeted(u8),
}

impl AttackMode {
    fn validate(self) -> Result<()> {
        match self {
            AttackMode::Targeted(l) if l as usize >= NUM_CLASSES => {
                Err(usage_err!("target label {l} outside 0..{NUM_CLASSES}"))
            }
            _ => Ok(()),
        }
    }

    /// One-hot rows the cross-entropy term is measured against.
    fn targets(self, true_onehot: &Tensor) -> Tensor {
        match self {
            AttackMode::Untargeted => true_onehot.clone(),
            AttackMode::Targeted(l) => one_hot(&alloc::vec![l; true_onehot.shape()[0]]),
        }
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackMode::Untargeted => f.write_str("untargeted"),
            AttackMode::Targeted(l) => write!(f, "targeted:{l}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SptTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: AttackMode,
    /// Seeds the per-epoch batch order.
    pub shuffle_seed: u64,
}

impl Default for SptTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 1,
            batch_size: DEFAULT_BATCH_SIZE,
            mode: AttackMode::Untargeted,
            shuffle_seed: 0,
        }
    }
}

impl SptTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(usage_err!("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(usage_err!("SPT training needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(usage_err!("batch size must be at least 1"));
        }
        self.mode.validate()
    }
}

/// Batch objective and its gradient with respect to the SPT weights.
///
/// Untargeted: `-CE(f(g(x)), y_true) + alpha * |w|^2`; targeted:
/// `CE(f(g(x)), y_target) + alpha * |w|^2`. Cross-entropy is the batch mean.
pub fn batch_objective(
    target: &ClassifierModel,
    params: &SptParams,
    images: &Tensor,
    true_onehot: &Tensor,
    mode: AttackMode,
) -> Result<(f64, Vec<f64>)> {
    mode.validate()?;
    let targets = mode.targets(true_onehot);
    let mut tape = Tape::new();
    let x = tape.leaf_ref(images, false);
    let (adv, w) = params.record(&mut tape, x, true)?;
    let logits = target.forward(&mut tape, adv, false)?.logits;
    let ce = tape.softmax_cross_entropy(logits, &targets)?;
    let data_term = match mode {
        AttackMode::Untargeted => tape.neg(ce)?,
        AttackMode::Targeted(_) => ce,
    };
    let sq = tape.sum_squares(w)?;
    let penalty = tape.scale(sq, params.alpha)?;
    let objective = tape.add(data_term, penalty)?;
    tape.backward(objective)?;
    let value = tape.value(objective).data()[0];
    let grad = tape.take_grad(w).expect("weights are trainable");
    Ok((value, grad))
}

/// Example-weighted mean of the objective over a whole dataset.
pub fn dataset_objective(
    target: &ClassifierModel,
    params: &SptParams,
    dataset: &Dataset,
    mode: AttackMode,
    batch_size: usize,
) -> Result<f64> {
    mode.validate()?;
    let mut total = 0.0;
    for batch in dataset.batches(batch_size.max(1), None)? {
        let adv = transform(params, &batch.images)?;
        let targets = mode.targets(&batch.onehot);
        let mut tape = Tape::new();
        let x = tape.leaf(adv, false);
        let logits = target.forward(&mut tape, x, false)?.logits;
        let loss = tape.softmax_cross_entropy(logits, &targets)?;
        let ce = tape.value(loss).data()[0];
        let sign = if mode == AttackMode::Untargeted { -1.0 } else { 1.0 };
        total += sign * ce * batch.labels.len() as f64;
    }
    Ok(total / dataset.len() as f64 + params.penalty())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SptProgress {
    pub epoch: usize,
    pub batch: usize,
    pub batches: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SptTrainReport {
    pub params: SptParams,
    /// Objective of every batch, measured before its update.
    pub batch_objectives: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

/// Fits the SPT weights against a frozen target.
///
/// The target is only borrowed immutably, so its parameters cannot change;
/// only the weight vector is updated.
pub fn train_spt(
    target: &ClassifierModel,
    dataset: &Dataset,
    params: &SptParams,
    cfg: &SptTrainConfig,
    progress: &mut dyn FnMut(SptProgress),
) -> Result<SptTrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(usage_err!("cannot train SPT on an empty dataset"));
    }
    let mut current = params.clone();
    let mut adam = AdamState::new(current.weights.len(), AdamConfig::with_learning_rate(cfg.learning_rate));
    let mut batch_objectives = Vec::new();
    let mut epoch_means = Vec::new();
    for epoch in 0..cfg.epochs {
        let seed = rng::derive_seed(cfg.shuffle_seed, epoch as u64);
        let batches = dataset.batches(cfg.batch_size, Some(seed))?;
        let count = batches.len();
        let mut total = 0.0;
        for (i, batch) in batches.enumerate() {
            let (value, grad) = batch_objective(target, &current, &batch.images, &batch.onehot, cfg.mode)?;
            adam.step(&mut current.weights, &grad)?;
            batch_objectives.push(value);
            total += value;
            progress(SptProgress {
                epoch,
                batch: i,
                batches: count,
                objective: value,
            });
        }
        epoch_means.push(total / count as f64);
    }
    Ok(SptTrainReport {
        params: current,
        batch_objectives,
        epoch_means,
    })
}

/// Monotonicity of the learned scalar map, sampled on a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityReport {
    pub grid_points: usize,
    pub strictly_increasing: bool,
    pub strictly_decreasing: bool,
    /// Number of adjacent grid pairs that map to the same output.
    pub collisions: usize,
}

impl MonotonicityReport {
    pub fn injective_on_grid(&self) -> bool {
        self.strictly_increasing || self.strictly_decreasing
    }
}

pub fn monotonicity(params: &SptParams, grid_points: usize) -> Result<MonotonicityReport> {
    if grid_points < 2 {
        return Err(usage_err!("need at least two grid points"));
    }
    let grid: Vec<f64> = (0..grid_points)
        .map(|i| i as f64 / (grid_points - 1) as f64)
        .collect();
    let t = Tensor::new(&[grid_points], grid)?;
    let mut tape = Tape::new();
    let x = tape.leaf(t, false);
    let (out, _) = params.record(&mut tape, x, false)?;
    let ys = tape.value(out).data();
    let pairs = ys.windows(2);
    let collisions = pairs.clone().filter(|w| w[0] == w[1]).count();
    Ok(MonotonicityReport {
        grid_points,
        strictly_increasing: ys.windows(2).all(|w| w[1] > w[0]),
        strictly_decreasing: ys.windows(2).all(|w| w[1] < w[0]),
        collisions,
    })
}

/// Mean pixel value of a batch.
pub fn mean_brightness(images: &Tensor) -> f64 {
    images.data().iter().sum::<f64>() / images.len() as f64
}
