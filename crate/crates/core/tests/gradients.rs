//! Tape gradients against central finite differences.

use rand::Rng;
use spt_core::autodiff::{Padding, Tape, Var};
use spt_core::data::one_hot;
use spt_core::model::{ArchitectureId, ClassifierModel};
use spt_core::spt::{batch_objective, AttackMode, SptParams};
use spt_core::{rng, Tensor};

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Max absolute deviation over the largest gradient magnitude.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(1e-12_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Builds `f` on a fresh tape over `inputs` (all requiring grad) and compares
/// the gradient of input `which` with central differences at `coords`.
fn check<F>(inputs: &[Tensor], which: usize, coords: &[usize], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let full = tape.grad(vars[which]).unwrap().to_vec();
    let analytic: Vec<f64> = coords.iter().map(|&i| full[i]).collect();
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&i| {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        })
        .collect();
    rel_error(&analytic, &numeric)
}

fn all(t: &Tensor) -> Vec<usize> {
    (0..t.len()).collect()
}

fn sampled(t: &Tensor, count: usize, seed: u64) -> Vec<usize> {
    if t.len() <= count {
        return all(t);
    }
    let mut r = rng::rng(seed);
    (0..count).map(|_| r.random_range(0..t.len())).collect()
}

const H: f64 = 1e-5;

#[test]
fn elementwise_ops() {
    let x = random(&[3, 7], -2.0, 2.0, 1);
    type Build = fn(&mut Tape<'_>, Var) -> Var;
    let cases: [(&str, Build); 4] = [
        ("sigmoid", |t, v| t.sigmoid(v).unwrap()),
        ("neg", |t, v| t.neg(v).unwrap()),
        ("scale", |t, v| t.scale(v, -1.7).unwrap()),
        ("relu", |t, v| t.relu(v).unwrap()),
    ];
    for (name, op) in cases {
        let err = check(std::slice::from_ref(&x), 0, &all(&x), H, |t, v| {
            let y = op(t, v[0]);
            t.sum_squares(y).unwrap()
        });
        assert!(err < 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn power_at_interior_points() {
    let x = random(&[4, 5], 0.05, 0.95, 2);
    for gamma in [0.04, 0.4, 1.0, 2.5, 25.0] {
        let err = check(std::slice::from_ref(&x), 0, &all(&x), 1e-7, |t, v| {
            let y = t.power(v[0], gamma).unwrap();
            t.sum_squares(y).unwrap()
        });
        assert!(err < 1e-6, "gamma {gamma}: {err:e}");
    }
}

#[test]
fn add_and_sum_squares() {
    let a = random(&[2, 3], -1.0, 1.0, 3);
    let b = random(&[2, 3], -1.0, 1.0, 4);
    for which in 0..2 {
        let err = check(&[a.clone(), b.clone()], which, &all(&a), H, |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let s = t.sigmoid(s).unwrap();
            t.sum_squares(s).unwrap()
        });
        assert!(err < 1e-6, "input {which}: {err:e}");
    }
}

#[test]
fn weighted_sum_weights_and_terms() {
    let w = random(&[3], -1.0, 1.0, 5);
    let terms: Vec<Tensor> = (0..3).map(|k| random(&[2, 4], -1.0, 1.0, 6 + k)).collect();
    let mut inputs = vec![w.clone()];
    inputs.extend(terms);
    for which in 0..4 {
        let coords = all(&inputs[which]);
        let err = check(&inputs, which, &coords, H, |t, v| {
            let s = t.weighted_sum(v[0], &v[1..]).unwrap();
            let s = t.sigmoid(s).unwrap();
            t.sum_squares(s).unwrap()
        });
        assert!(err < 1e-6, "input {which}: {err:e}");
    }
}

#[test]
fn softmax_cross_entropy_logits() {
    let z = random(&[5, 10], -3.0, 3.0, 10);
    let y = one_hot(&[0, 3, 9, 3, 7]);
    let err = check(std::slice::from_ref(&z), 0, &all(&z), H, |t, v| {
        t.softmax_cross_entropy(v[0], &y).unwrap()
    });
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn affine_all_inputs() {
    let x = random(&[4, 6], -1.0, 1.0, 11);
    let w = random(&[6, 10], -1.0, 1.0, 12);
    let b = random(&[10], -1.0, 1.0, 13);
    let y = one_hot(&[1, 2, 3, 4]);
    let inputs = [x, w, b];
    for which in 0..3 {
        let coords = all(&inputs[which]);
        let err = check(&inputs, which, &coords, H, |t, v| {
            let z = t.affine(v[0], v[1], v[2]).unwrap();
            t.softmax_cross_entropy(z, &y).unwrap()
        });
        assert!(err < 1e-4, "input {which}: {err:e}");
    }
}

#[test]
fn conv2d_same_and_valid() {
    for (padding, stride, size, k) in [
        (Padding::Same, 1, 7, 5),
        (Padding::Same, 2, 8, 4),
        (Padding::Same, 1, 6, 4),
        (Padding::Valid, 1, 7, 3),
        (Padding::Valid, 2, 9, 3),
    ] {
        let x = random(&[2, 3, size, size], -1.0, 1.0, 20);
        let w = random(&[4, 3, k, k], -0.5, 0.5, 21);
        let b = random(&[4], -0.5, 0.5, 22);
        let inputs = [x, w, b];
        for which in 0..3 {
            let coords = sampled(&inputs[which], 60, 23 + which as u64);
            let err = check(&inputs, which, &coords, H, |t, v| {
                let c = t.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
                t.sum_squares(c).unwrap()
            });
            assert!(err < 1e-4, "{padding:?} stride {stride} k {k} input {which}: {err:e}");
        }
    }
}

#[test]
fn maxpool_with_partial_windows() {
    // 7x7 with window 2 exercises the padded last row and column.
    for size in [6, 7] {
        let x = random(&[2, 2, size, size], -1.0, 1.0, 30 + size as u64);
        let err = check(std::slice::from_ref(&x), 0, &all(&x), H, |t, v| {
            let p = t.maxpool2d(v[0], 2, 2).unwrap();
            t.sum_squares(p).unwrap()
        });
        assert!(err < 1e-4, "size {size}: {err:e}");
    }
}

#[test]
fn flatten_then_affine() {
    let x = random(&[2, 2, 3, 3], -1.0, 1.0, 40);
    let w = random(&[18, 10], -1.0, 1.0, 41);
    let b = Tensor::zeros(&[10]);
    let y = one_hot(&[4, 8]);
    let err = check(&[x.clone(), w, b], 0, &all(&x), H, |t, v| {
        let f = t.flatten(v[0]).unwrap();
        let z = t.affine(f, v[1], v[2]).unwrap();
        t.softmax_cross_entropy(z, &y).unwrap()
    });
    assert!(err < 1e-4, "{err:e}");
}

/// Central differences at `h` and `h / 4`; `None` when they disagree, which
/// means a ReLU or max-pool kink lies inside the stencil.
fn smooth_difference(f: impl Fn(f64) -> f64) -> Option<f64> {
    let at = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let (coarse, fine) = (at(H), at(H / 4.0));
    ((coarse - fine).abs() <= 1e-6 * coarse.abs().max(1e-3)).then_some(coarse)
}

/// Compares `analytic` with kink-free differences; at most a quarter of the
/// coordinates may be skipped.
fn compare_smooth(analytic: &[f64], numeric: &[Option<f64>]) -> f64 {
    let kept: Vec<(f64, f64)> = analytic
        .iter()
        .zip(numeric)
        .filter_map(|(&a, n)| n.map(|n| (a, n)))
        .collect();
    assert!(
        kept.len() * 4 >= analytic.len() * 3,
        "{} of {} coordinates sit on kinks",
        analytic.len() - kept.len(),
        analytic.len()
    );
    let (a, n): (Vec<f64>, Vec<f64>) = kept.into_iter().unzip();
    rel_error(&a, &n)
}

fn model_loss(model: &ClassifierModel, images: &Tensor, y: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone(), false);
    let out = model.forward(&mut tape, x, false).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, y).unwrap();
    tape.value(loss).data()[0]
}

#[test]
fn full_network_parameter_gradients() {
    let images = random(&[2, 1, 28, 28], 0.0, 1.0, 50);
    let y = one_hot(&[3, 8]);
    for id in [ArchitectureId::Cp, ArchitectureId::Ca1, ArchitectureId::Ca3] {
        let model = ClassifierModel::build(id, 7);
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), false);
        let out = model.forward(&mut tape, x, true).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, &y).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = out.params.iter().map(|&p| tape.grad(p).unwrap().to_vec()).collect();
        drop(tape);
        for (k, param) in model.params().iter().enumerate() {
            let coords = sampled(&param.value, 12, 60 + k as u64);
            let probe = std::cell::RefCell::new(model.clone());
            let numeric: Vec<Option<f64>> = coords
                .iter()
                .map(|&i| {
                    let base = model.params()[k].value.data()[i];
                    smooth_difference(|d| {
                        let mut p = probe.borrow_mut();
                        p.params_mut()[k].value.data_mut()[i] = base + d;
                        let loss = model_loss(&p, &images, &y);
                        p.params_mut()[k].value.data_mut()[i] = base;
                        loss
                    })
                })
                .collect();
            let analytic: Vec<f64> = coords.iter().map(|&i| grads[k][i]).collect();
            let err = compare_smooth(&analytic, &numeric);
            assert!(err < 1e-4, "{id} {}: {err:e}", param.name);
        }
    }
}

#[test]
fn input_gradient_matches_differences() {
    let model = ClassifierModel::build(ArchitectureId::Cp, 8);
    let images = random(&[2, 1, 28, 28], 0.1, 0.9, 70);
    let y = one_hot(&[1, 6]);
    let (_, grad) = model.input_gradient(&images, &y).unwrap();
    let coords = sampled(&images, 40, 71);
    let numeric: Vec<Option<f64>> = coords
        .iter()
        .map(|&i| {
            smooth_difference(|d| {
                let mut shifted = images.clone();
                shifted.data_mut()[i] += d;
                model_loss(&model, &shifted, &y)
            })
        })
        .collect();
    let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
    let err = compare_smooth(&analytic, &numeric);
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn spt_weight_gradient() {
    let model = ClassifierModel::build(ArchitectureId::Cp, 9);
    let images = random(&[3, 1, 28, 28], 0.0, 1.0, 80);
    let y = one_hot(&[0, 5, 9]);
    let h = 1e-6;
    for (mode, alpha) in [
        (AttackMode::Untargeted, 0.0),
        (AttackMode::Untargeted, 0.6),
        (AttackMode::Targeted(2), 0.6),
    ] {
        let params = SptParams::with_defaults(alpha, 3);
        let (_, grad) = batch_objective(&model, &params, &images, &y, mode).unwrap();
        let numeric: Vec<f64> = (0..params.weights.len())
            .map(|i| {
                let mut up = params.clone();
                up.weights[i] += h;
                let mut down = params.clone();
                down.weights[i] -= h;
                let f = |p: &SptParams| batch_objective(&model, p, &images, &y, mode).unwrap().0;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect();
        let err = rel_error(&grad, &numeric);
        assert!(err < 1e-4, "{mode} alpha {alpha}: {err:e}");
    }
}
