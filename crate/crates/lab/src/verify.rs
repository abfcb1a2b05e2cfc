//! Invariant checks runnable against real data and checkpoints.

use spt_core::attack::{fgsm, pgd, PerturbationConfig};
use spt_core::data::{argmax_rows, one_hot, Dataset};
use spt_core::eval::{accuracy_of, check_structure_preserved, histogram_of};
use spt_core::model::{ArchitectureId, ClassifierModel};
use spt_core::spt::{self, AttackMode, SptParams};
use spt_core::Tensor;

use crate::checkpoint;
use crate::config::Defense;
use crate::error::Result;
use crate::pipeline::Lab;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name, passed, detail: detail.into() }
    }
}

/// Largest `|x' - x|` and whether every `x'` lies in `[0, 1]`.
pub fn linf_summary(adv: &Tensor, orig: &Tensor) -> (f64, bool) {
    let dist = adv
        .data()
        .iter()
        .zip(orig.data())
        .map(|(a, o)| (a - o).abs())
        .fold(0.0, f64::max);
    (dist, adv.data().iter().all(|v| (0.0..=1.0).contains(v)))
}

fn first(ds: &Dataset, n: usize) -> Result<(Tensor, Tensor, Vec<u8>)> {
    let k = n.min(ds.len());
    let idx: Vec<usize> = (0..k).collect();
    let b = ds.batch(&idx)?;
    Ok((b.images, b.onehot, b.labels))
}

/// Runs every check; failures are reported, not returned as errors.
pub fn run(lab: &Lab) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let test = lab.test_set()?;

    let decoded = argmax_rows(&one_hot(test.labels()));
    out.push(Check::new("labels survive one-hot round trip", decoded == test.labels(), format!("{} labels", test.len())));

    let model = match lab.classifier_if_present(ArchitectureId::Cp, Defense::None)? {
        Some(m) => m,
        None => ClassifierModel::build(ArchitectureId::Cp, lab.config().seed),
    };

    let params = SptParams::with_defaults(lab.config().alpha(), lab.config().spt.init_seed);
    let adv = spt::generate(&params, test.images())?;
    let check = check_structure_preserved(test.images(), &adv)?;
    out.push(Check::new(
        "SPT output preserves structure patterns",
        check.passed(),
        format!("{} images, {} patterns, {} violations", check.images, check.patterns, check.violation_count),
    ));
    let again = spt::generate(&params, test.images())?;
    out.push(Check::new("SPT generation is deterministic", again == adv, ""));
    let in_range = adv.data().iter().all(|&v| v > 0.0 && v < 1.0);
    out.push(Check::new("SPT output lies in (0, 1)", in_range, ""));

    let (x, y, labels) = first(test, 32)?;
    let f = fgsm(&model, &x, &y, 0.3)?;
    let broken = check_structure_preserved(&x, &f)?;
    out.push(Check::new(
        "FGSM breaks structure patterns",
        !broken.passed(),
        format!("{} violations", broken.violation_count),
    ));
    let (dist, in_unit) = linf_summary(&f, &x);
    out.push(Check::new("FGSM stays in the eps-ball and [0, 1]", dist <= 0.3 + 1e-12 && in_unit, format!("max |dx| {dist}")));
    let cfg = PerturbationConfig { iterations: 3, ..PerturbationConfig::pgd_eval(lab.pgd_seed()) };
    let p1 = pgd(&model, &x, &y, &cfg)?;
    let (dist, in_unit) = linf_summary(&p1, &x);
    out.push(Check::new("PGD stays in the eps-ball and [0, 1]", dist <= 0.3 + 1e-12 && in_unit, format!("max |dx| {dist}")));
    out.push(Check::new("PGD is deterministic for a fixed seed", pgd(&model, &x, &y, &cfg)? == p1, ""));
    out.push(Check::new("zero-budget FGSM is the identity", fgsm(&model, &x, &y, 0.0)? == x, ""));

    let bytes = checkpoint::encode(&model);
    let restored = checkpoint::decode(std::path::Path::new("<memory>"), &bytes)?;
    out.push(Check::new(
        "checkpoint round trip keeps predictions",
        restored.predict(&x)? == model.predict(&x)?,
        format!("{} bytes", bytes.len()),
    ));

    let predicted = model.predict_labels(&x)?;
    let hist = histogram_of(&predicted)?;
    let sum: f64 = hist.iter().sum();
    out.push(Check::new("prediction histogram sums to 1", (sum - 1.0).abs() <= 1e-9, format!("{sum}")));
    let label = labels[0];
    let same: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
    let sub: Vec<u8> = same.iter().map(|&i| predicted[i]).collect();
    let acc = accuracy_of(&sub, &vec![label; sub.len()])?;
    out.push(Check::new(
        "accuracy equals histogram mass on the true label",
        (acc - histogram_of(&sub)?[label as usize]).abs() <= 1e-12,
        "",
    ));

    let (xs, ys, _) = first(test, 4)?;
    let (_, grad) = spt::batch_objective(&model, &params, &xs, &ys, AttackMode::Untargeted)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let scale = grad.iter().fold(1e-12_f64, |m, g| m.max(g.abs()));
    for (i, g) in grad.iter().enumerate() {
        let mut up = params.clone();
        up.weights[i] += h;
        let mut down = params.clone();
        down.weights[i] -= h;
        let f = |p: &SptParams| spt::batch_objective(&model, p, &xs, &ys, AttackMode::Untargeted).map(|r| r.0);
        let numeric = (f(&up)? - f(&down)?) / (2.0 * h);
        worst = worst.max((numeric - g).abs() / scale);
    }
    out.push(Check::new("SPT weight gradient matches finite differences", worst < 1e-4, format!("rel err {worst:.2e}")));
    Ok(out)
}
