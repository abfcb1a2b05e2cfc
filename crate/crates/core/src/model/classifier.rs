use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::arch::{ArchitectureId, ArchitectureSpec, Layer};
use crate::attack::PerturbationConfig;
use crate::autodiff::{softmax_rows, Padding, Tape, Var};
use crate::data::{argmax_rows, check_images};
use crate::error::{dim_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.1;
/// Constant initial bias.
pub const INIT_BIAS: f64 = 0.1;

/// Images per forward chunk when no gradients are needed.
const INFERENCE_CHUNK: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// How a model was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: u32,
    pub test_accuracy: Option<f64>,
    /// Set when the model was trained on PGD adversarial batches.
    pub adversarial: Option<PerturbationConfig>,
}

/// An architecture plus its parameters. `predict` is a pure function of both.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    spec: ArchitectureSpec,
    params: Vec<NamedParam>,
    pub meta: TrainingMeta,
}

/// Tape handles produced by [`ClassifierModel::forward`].
pub struct ModelForward {
    pub logits: Var,
    /// Parameter leaves, in [`ClassifierModel::params`] order.
    pub params: Vec<Var>,
}

impl ClassifierModel {
    /// Fresh parameters: truncated normal (std 0.1, cut at 2 std) weights
    /// and 0.1 biases. The stream depends on both `seed` and `id`.
    pub fn build(id: ArchitectureId, seed: u64) -> Self {
        let spec = id.spec();
        let mut rng = rng::rng_for(seed, id.seed_tag());
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|p| {
                let len = p.shape.iter().product();
                let data = if p.name.ends_with(".bias") {
                    alloc::vec![INIT_BIAS; len]
                } else {
                    (0..len)
                        .map(|_| loop {
                            let z: f64 = rng.sample(StandardNormal);
                            if z.abs() <= 2.0 {
                                break z * INIT_STD;
                            }
                        })
                        .collect()
                };
                NamedParam {
                    value: Tensor::new(&p.shape, data).expect("shape from architecture"),
                    name: p.name,
                }
            })
            .collect();
        Self {
            spec,
            params,
            meta: TrainingMeta {
                seed,
                epochs: 0,
                test_accuracy: None,
                adversarial: None,
            },
        }
    }

    /// Reassembles a model, checking names and shapes against the architecture.
    pub fn from_parts(id: ArchitectureId, params: Vec<NamedParam>, meta: TrainingMeta) -> Result<Self> {
        let spec = id.spec();
        let expected = spec.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Validation(alloc::format!(
                "{id} has {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(&params) {
            if e.name != p.name || e.shape != p.value.shape() {
                return Err(Error::Validation(alloc::format!(
                    "{id} expects {} {:?}, got {} {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { spec, params, meta })
    }

    pub fn id(&self) -> ArchitectureId {
        self.spec.id
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records the network on `tape`, returning logits `[N, 10]`.
    ///
    /// Parameters enter as borrowed leaves; `trainable` decides whether
    /// they collect gradients.
    pub fn forward<'t>(&'t self, tape: &mut Tape<'t>, input: Var, trainable: bool) -> Result<ModelForward> {
        check_images(tape.value(input))?;
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf_ref(&p.value, trainable))
            .collect();
        let mut next = param_vars.iter().copied();
        let mut x = input;
        let mut spatial = true;
        for layer in &self.spec.layers {
            x = match *layer {
                Layer::Conv { stride, .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    tape.conv2d(x, w, b, stride, Padding::Same)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::MaxPool { size } => tape.maxpool2d(x, size, size)?,
                Layer::Fc { .. } => {
                    if spatial {
                        x = tape.flatten(x)?;
                        spatial = false;
                    }
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    tape.affine(x, w, b)?
                }
                // Applied by predict or folded into the cross-entropy.
                Layer::Softmax => x,
            };
        }
        Ok(ModelForward {
            logits: x,
            params: param_vars,
        })
    }

    /// Logits for a batch of images, computed in bounded chunks.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        check_images(images)?;
        let n = images.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let chunk = images.slice_rows(start, end)?;
            let mut tape = Tape::new();
            let x = tape.leaf(chunk, false);
            let out = self.forward(&mut tape, x, false)?;
            parts.push(tape.value(out.logits).clone());
        }
        Tensor::concat_rows(&parts)
    }

    /// Class probabilities `[N, 10]`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let logits = self.logits(images)?;
        let probs = softmax_rows(logits.data(), NUM_CLASSES);
        Tensor::new(logits.shape(), probs)
    }

    pub fn predict_labels(&self, images: &Tensor) -> Result<Vec<u8>> {
        Ok(argmax_rows(&self.logits(images)?))
    }

    /// Mean cross-entropy and its gradient with respect to the images.
    pub fn input_gradient(&self, images: &Tensor, onehot: &Tensor) -> Result<(f64, Vec<f64>)> {
        if onehot.shape() != [images.shape()[0], NUM_CLASSES] {
            return Err(dim_err!(
                "{} images but targets of shape {:?}",
                images.shape()[0],
                onehot.shape()
            ));
        }
        let mut tape = Tape::new();
        let x = tape.leaf_ref(images, true);
        let out = self.forward(&mut tape, x, false)?;
        let loss = tape.softmax_cross_entropy(out.logits, onehot)?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let grad = tape
            .take_grad(x)
            .unwrap_or_else(|| alloc::vec![0.0; images.len()]);
        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_seeded_and_per_architecture() {
        let a = ClassifierModel::build(ArchitectureId::Ca2, 11);
        let b = ClassifierModel::build(ArchitectureId::Ca2, 11);
        assert_eq!(a, b);
        let p = ClassifierModel::build(ArchitectureId::Cp, 11);
        let p0 = ClassifierModel::build(ArchitectureId::Ca0, 11);
        assert_eq!(p.spec().layers, p0.spec().layers);
        assert_ne!(p.params()[0].value, p0.params()[0].value);
    }

    #[test]
    fn init_is_truncated() {
        let m = ClassifierModel::build(ArchitectureId::Ca2, 3);
        for p in m.params() {
            if p.name.ends_with(".bias") {
                assert!(p.value.data().iter().all(|&v| v == INIT_BIAS));
            } else {
                assert!(p.value.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
            }
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = ClassifierModel::build(ArchitectureId::Ca3, 0);
        let bad = Tensor::zeros(&[2, 1, 27, 28]);
        assert!(matches!(m.predict(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = ClassifierModel::build(ArchitectureId::Ca2, 0);
        let params = m.params().to_vec();
        assert!(ClassifierModel::from_parts(ArchitectureId::Ca2, params.clone(), m.meta.clone()).is_ok());
        assert!(ClassifierModel::from_parts(ArchitectureId::Ca1, params, m.meta.clone()).is_err());
    }
}
