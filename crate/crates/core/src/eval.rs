//! Accuracy, prediction histograms and structure-pattern checks.

use alloc::vec::Vec;

use crate::data::argmax_rows;
use crate::error::{dim_err, usage_err, Result};
use crate::model::ClassifierModel;
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// Fraction of `predicted[i] == labels[i]`.
pub fn accuracy_of(predicted: &[u8], labels: &[u8]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(usage_err!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        ));
    }
    if labels.is_empty() {
        return Err(usage_err!("accuracy of an empty set is undefined"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(model: &ClassifierModel, images: &Tensor, labels: &[u8]) -> Result<f64> {
    if images.shape()[0] != labels.len() {
        return Err(usage_err!(
            "{} images for {} labels",
            images.shape()[0],
            labels.len()
        ));
    }
    accuracy_of(&model.predict_labels(images)?, labels)
}

/// Fraction of examples predicted as each class.
pub fn histogram_of(predicted: &[u8]) -> Result<[f64; NUM_CLASSES]> {
    if predicted.is_empty() {
        return Err(usage_err!("prediction statistics need a nonempty batch"));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &p in predicted {
        counts[p as usize] += 1;
    }
    Ok(counts.map(|c| c as f64 / predicted.len() as f64))
}

pub fn prediction_statistics(model: &ClassifierModel, images: &Tensor) -> Result<[f64; NUM_CLASSES]> {
    histogram_of(&argmax_rows(&model.logits(images)?))
}

/// Pixels of one image sharing an exact gray level.
#[derive(Debug, Clone, PartialEq)]
pub struct StructurePattern {
    pub level: f64,
    /// `(row, column)` coordinates.
    pub pixels: Vec<(usize, usize)>,
}

/// Partitions an `height x width` image into its structure patterns,
/// ordered by gray level.
pub fn structure_patterns(image: &[f64], width: usize) -> Vec<StructurePattern> {
    let mut patterns: Vec<StructurePattern> = Vec::new();
    for (start, end, order) in level_groups(image) {
        let pixels = order[start..end].iter().map(|&i| (i / width, i % width)).collect();
        patterns.push(StructurePattern {
            level: image[order[start]],
            pixels,
        });
    }
    patterns
}

/// Sorts pixel indices by value and yields `[start, end)` runs of equal value.
fn level_groups(image: &[f64]) -> impl Iterator<Item = (usize, usize, alloc::rc::Rc<Vec<usize>>)> {
    let mut order: Vec<usize> = (0..image.len()).collect();
    order.sort_by(|&a, &b| image[a].total_cmp(&image[b]).then(a.cmp(&b)));
    let mut bounds = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        // `==` so that 0.0 and -0.0 land in one pattern.
        if i == order.len() || image[order[i]] != image[order[start]] {
            bounds.push((start, i));
            start = i;
        }
    }
    let order = alloc::rc::Rc::new(order);
    bounds.into_iter().map(move |(s, e)| (s, e, order.clone()))
}

/// Two pixels that shared a gray level before the transform but not after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureViolation {
    pub image: usize,
    pub level: f64,
    pub reference: (usize, usize),
    pub pixel: (usize, usize),
    pub reference_value: f64,
    pub pixel_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StructureCheck {
    pub images: usize,
    pub patterns: usize,
    pub violation_count: usize,
    /// The first violations found (at most [`MAX_RECORDED_VIOLATIONS`]).
    pub violations: Vec<StructureViolation>,
}

pub const MAX_RECORDED_VIOLATIONS: usize = 64;

impl StructureCheck {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

/// Exact check that each structure pattern of every original image maps to
/// a single value in the corresponding transformed image.
pub fn check_structure_preserved(original: &Tensor, transformed: &Tensor) -> Result<StructureCheck> {
    check_structure_within(original, transformed, 0.0)
}

/// As [`check_structure_preserved`], accepting spreads up to `tolerance`
/// within a pattern (for quantized exports).
pub fn check_structure_within(original: &Tensor, transformed: &Tensor, tolerance: f64) -> Result<StructureCheck> {
    if original.shape() != transformed.shape() {
        return Err(dim_err!(
            "original {:?} and transformed {:?} differ in shape",
            original.shape(),
            transformed.shape()
        ));
    }
    let width = *original.shape().last().unwrap();
    let mut check = StructureCheck {
        images: original.shape()[0],
        ..StructureCheck::default()
    };
    for n in 0..check.images {
        let (src, dst) = (original.row(n), transformed.row(n));
        for (start, end, order) in level_groups(src) {
            check.patterns += 1;
            let group = &order[start..end];
            let lo = group.iter().map(|&i| dst[i]).fold(f64::INFINITY, f64::min);
            let hi = group.iter().map(|&i| dst[i]).fold(f64::NEG_INFINITY, f64::max);
            if hi - lo <= tolerance {
                continue;
            }
            let reference = group[0];
            for &i in &group[1..] {
                if (dst[i] - dst[reference]).abs() > tolerance {
                    check.violation_count += 1;
                    if check.violations.len() < MAX_RECORDED_VIOLATIONS {
                        let rc = |i: usize| (i / width, i % width);
                        check.violations.push(StructureViolation {
                            image: n,
                            level: src[reference],
                            reference: rc(reference),
                            pixel: rc(i),
                            reference_value: dst[reference],
                            pixel_value: dst[i],
                        });
                    }
                }
            }
        }
    }
    Ok(check)
}
