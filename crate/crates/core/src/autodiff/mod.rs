//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse and leaves
//! `d root / d leaf` on every leaf created with `requires_grad`.
//!
//! Leaves can borrow their values (`Tape::leaf_ref`), so a frozen model can
//! be placed on many tapes without copying its parameters. Gradients are
//! only computed along paths that lead to a leaf which asked for them.
//!
//! ```
//! use spt_core::autodiff::Tape;
//! use spt_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), true);
//! let y = tape.sum_squares(x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
//! ```

pub(crate) mod kernels;

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

pub use kernels::{softmax_rows, ConvGeom, PoolGeom, POWER_GRAD_FLOOR};

use crate::error::{dim_err, usage_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding mode for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`; odd totals put the
    /// extra row/column at the bottom/right.
    Same,
    /// No padding.
    Valid,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Power {
        input: Var,
        gamma: f64,
    },
    WeightedSum {
        weights: Var,
        terms: Vec<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    Neg {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    SumSquares {
        input: Var,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient; only ever populated on leaves.
    grad: Option<Vec<f64>>,
}

/// Ordered record of operations; see the module docs.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Records a leaf that borrows its value.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, var: Var) -> Result<&Node<'a>> {
        self.nodes
            .get(var.0)
            .ok_or_else(|| usage_err!("variable {} is not on this tape", var.0))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Vec<f64>> {
        self.nodes[var.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let x = self.node(input)?;
        let k = self.node(kernel)?;
        let b = self.node(bias)?;
        let (xs, ks) = (x.value.shape(), k.value.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(dim_err!("conv2d expects 4-D input and kernel, got {xs:?} and {ks:?}"));
        }
        if xs[1] != ks[1] {
            return Err(dim_err!(
                "conv2d input has {} channels but kernel expects {}",
                xs[1],
                ks[1]
            ));
        }
        if b.value.shape() != [ks[0]] {
            return Err(dim_err!(
                "conv2d bias shape {:?} does not match {} filters",
                b.value.shape(),
                ks[0]
            ));
        }
        if stride == 0 {
            return Err(usage_err!("conv2d stride must be positive"));
        }
        let geom = conv_geometry(xs, ks, stride, padding)?;
        let (batch, filters) = (xs[0], ks[0]);
        let out = kernels::conv2d_forward(
            x.value.data(),
            batch,
            k.value.data(),
            b.value.data(),
            filters,
            &geom,
        );
        let rg = x.requires_grad || k.requires_grad || b.requires_grad;
        let value = Tensor::new(&[batch, filters, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Max pooling with a square `window` moved by `stride`.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let x = self.node(input)?;
        let xs = x.value.shape();
        if xs.len() != 4 {
            return Err(dim_err!("maxpool2d expects 4-D input, got {xs:?}"));
        }
        if window == 0 || stride == 0 {
            return Err(usage_err!("maxpool2d window and stride must be positive"));
        }
        if window > xs[2] || window > xs[3] {
            return Err(dim_err!(
                "pool window {window} larger than {}x{} input",
                xs[2],
                xs[3]
            ));
        }
        let geom = PoolGeom {
            planes: xs[0] * xs[1],
            height: xs[2],
            width: xs[3],
            window,
            stride,
            out_h: (xs[2] - window).div_ceil(stride) + 1,
            out_w: (xs[3] - window).div_ceil(stride) + 1,
        };
        let (out, argmax) = kernels::maxpool_forward(x.value.data(), &geom);
        let rg = x.requires_grad;
        let value = Tensor::new(&[xs[0], xs[1], geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, rg, Op::MaxPool2d { input, argmax }))
    }

    /// `input . weight + bias` for `input: [N, D]`, `weight: [D, M]`, `bias: [M]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.node(input)?;
        let w = self.node(weight)?;
        let b = self.node(bias)?;
        let (xs, ws) = (x.value.shape(), w.value.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(dim_err!("affine cannot multiply {xs:?} by {ws:?}"));
        }
        if b.value.shape() != [ws[1]] {
            return Err(dim_err!(
                "affine bias shape {:?} does not match {} outputs",
                b.value.shape(),
                ws[1]
            ));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(b.value.data());
        }
        kernels::gemm(n, d, m, x.value.data(), false, w.value.data(), false, 1.0, &mut out);
        let rg = x.requires_grad || w.requires_grad || b.requires_grad;
        let value = Tensor::new(&[n, m], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Affine {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Collapses all trailing axes: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input)?;
        let n = x.value.shape()[0];
        let d = x.value.row_len();
        let value = Tensor::new(&[n, d], x.value.data().to_vec())?;
        let rg = x.requires_grad;
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.map(input, |v| v.max(0.0), |input| Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.map(input, kernels::sigmoid, |input| Op::Sigmoid { input })
    }

    pub fn neg(&mut self, input: Var) -> Result<Var> {
        self.map(input, |v| -v, |input| Op::Neg { input })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.map(input, |v| v * factor, |input| Op::Scale { input, factor })
    }

    /// Elementwise `x^gamma` for inputs in `[0, 1]`.
    pub fn power(&mut self, input: Var, gamma: f64) -> Result<Var> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(alloc::format!(
                "power exponent must be finite and non-negative, got {gamma}"
            )));
        }
        let x = self.node(input)?;
        if let Some(bad) = x.value.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(alloc::format!(
                "power input {bad} outside [0, 1]"
            )));
        }
        self.map(
            input,
            |v| kernels::power(v, gamma),
            |input| Op::Power { input, gamma },
        )
    }

    fn map(&mut self, input: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(Var) -> Op) -> Result<Var> {
        let x = self.node(input)?;
        let data = x.value.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.value.shape(), data)?;
        let rg = x.requires_grad;
        Ok(self.push(value, rg, op(input)))
    }

    /// `sum_k weights[k] * terms[k]`; `weights` holds one scalar per term.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[Var]) -> Result<Var> {
        let w = self.node(weights)?;
        if w.value.len() != terms.len() || terms.is_empty() {
            return Err(dim_err!(
                "weighted_sum has {} weights for {} terms",
                w.value.len(),
                terms.len()
            ));
        }
        let shape = self.node(terms[0])?.value.shape().to_vec();
        let mut out = vec![0.0; self.node(terms[0])?.value.len()];
        let mut rg = w.requires_grad;
        for (&t, &wk) in terms.iter().zip(w.value.data()) {
            let tn = self.node(t)?;
            if tn.value.shape() != shape.as_slice() {
                return Err(dim_err!(
                    "weighted_sum term shape {:?} differs from {shape:?}",
                    tn.value.shape()
                ));
            }
            rg |= tn.requires_grad;
            for (o, &v) in out.iter_mut().zip(tn.value.data()) {
                *o += wk * v;
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            rg,
            Op::WeightedSum {
                weights,
                terms: terms.to_vec(),
            },
        ))
    }

    /// Mean over rows of `-sum_k onehot_k * log softmax(logits)_k`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, onehot: &Tensor) -> Result<Var> {
        let z = self.node(logits)?;
        let zs = z.value.shape();
        if zs.len() != 2 || zs != onehot.shape() {
            return Err(dim_err!(
                "cross-entropy logits {zs:?} and targets {:?} disagree",
                onehot.shape()
            ));
        }
        let k = zs[1];
        for (r, row) in onehot.data().chunks_exact(k).enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::Validation(alloc::format!(
                    "target row {r} is not one-hot"
                )));
            }
        }
        let probs = softmax_rows(z.value.data(), k);
        let mut total = 0.0;
        for (zr, yr) in z.value.data().chunks_exact(k).zip(onehot.data().chunks_exact(k)) {
            let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(zr.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
            let truth: f64 = zr.iter().zip(yr).map(|(&zv, &yv)| zv * yv).sum();
            total += lse - truth;
        }
        let loss = total / zs[0] as f64;
        let rg = z.requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: onehot.data().to_vec(),
                probs,
            },
        ))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a = self.node(lhs)?;
        let b = self.node(rhs)?;
        if a.value.shape() != b.value.shape() {
            return Err(dim_err!(
                "cannot add {:?} and {:?}",
                a.value.shape(),
                b.value.shape()
            ));
        }
        let data = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(a.value.shape(), data)?;
        let rg = a.requires_grad || b.requires_grad;
        Ok(self.push(value, rg, Op::Add { lhs, rhs }))
    }

    /// Scalar `sum_i x_i^2`.
    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input)?;
        let total = x.value.data().iter().map(|v| v * v).sum();
        let rg = x.requires_grad;
        Ok(self.push(Tensor::scalar(total), rg, Op::SumSquares { input }))
    }

    /// Propagates `d root` back to every leaf that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; use [`Tape::zero_grad`]
    /// between independent passes.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = self.node(root)?;
        if root_node.value.len() != 1 {
            return Err(usage_err!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            ));
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let out = kernels::conv2d_backward(
                    x.data(),
                    x.shape()[0],
                    k.data(),
                    k.shape()[0],
                    geom,
                    g,
                    self.wants(*input),
                    self.wants(*kernel),
                    self.wants(*bias),
                );
                accumulate(grads, *input, out.input);
                accumulate(grads, *kernel, out.kernel);
                accumulate(grads, *bias, out.bias);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![0.0; self.nodes[input.0].value.len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                accumulate(grads, *input, Some(dx));
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if self.wants(*input) {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(n, m, d, g, false, w.data(), true, 0.0, &mut dx);
                    accumulate(grads, *input, Some(dx));
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; d * m];
                    kernels::gemm(d, n, m, x.data(), true, g, false, 0.0, &mut dw);
                    accumulate(grads, *weight, Some(dw));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; m];
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, *bias, Some(db));
                }
            }
            Op::Reshape { input } => accumulate(grads, *input, Some(g.to_vec())),
            Op::Relu { input } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| if y > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *input, Some(dx));
            }
            Op::Sigmoid { input } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                accumulate(grads, *input, Some(dx));
            }
            Op::Power { input, gamma } => {
                let x = &self.nodes[input.0].value;
                let dx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * kernels::power_derivative(xv, *gamma))
                    .collect();
                accumulate(grads, *input, Some(dx));
            }
            Op::WeightedSum { weights, terms } => {
                let w = &self.nodes[weights.0].value;
                if self.wants(*weights) {
                    let dw = terms
                        .iter()
                        .map(|t| {
                            self.nodes[t.0]
                                .value
                                .data()
                                .iter()
                                .zip(g)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    accumulate(grads, *weights, Some(dw));
                }
                for (t, &wk) in terms.iter().zip(w.data()) {
                    if self.wants(*t) {
                        accumulate(grads, *t, Some(g.iter().map(|v| v * wk).collect()));
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = self.nodes[logits.0].value.shape()[0] as f64;
                let scale = g[0] / rows;
                let dz = probs
                    .iter()
                    .zip(targets)
                    .map(|(p, y)| scale * (p - y))
                    .collect();
                accumulate(grads, *logits, Some(dz));
            }
            Op::Neg { input } => accumulate(grads, *input, Some(g.iter().map(|v| -v).collect())),
            Op::Add { lhs, rhs } => {
                accumulate(grads, *lhs, Some(g.to_vec()));
                accumulate(grads, *rhs, Some(g.to_vec()));
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, Some(g.iter().map(|v| v * factor).collect()))
            }
            Op::SumSquares { input } => {
                let x = &self.nodes[input.0].value;
                let dx = x.data().iter().map(|v| 2.0 * v * g[0]).collect();
                accumulate(grads, *input, Some(dx));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Option<Vec<f64>>) {
    let Some(c) = contribution else { return };
    match &mut grads[var.0] {
        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
        slot => *slot = Some(c),
    }
}

/// Output geometry for a convolution of `input` (`[N,C,H,W]`) by `kernel` (`[F,C,kh,kw]`).
pub fn conv_geometry(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
    let (out_h, out_w, pad_top, pad_left) = match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(dim_err!("{kh}x{kw} kernel larger than {h}x{w} input"));
            }
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
        }
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let total_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let total_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            if kh > h + total_h || kw > w + total_w {
                return Err(dim_err!("{kh}x{kw} kernel larger than padded input"));
            }
            (out_h, out_w, total_h / 2, total_w / 2)
        }
    };
    Ok(ConvGeom {
        channels: input[1],
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        pad_top,
        pad_left,
        out_h,
        out_w,
    })
}
