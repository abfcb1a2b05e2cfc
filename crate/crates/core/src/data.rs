//! In-memory labeled image sets and deterministic mini-batching.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;

use crate::error::{usage_err, Error, Result};
use crate::tensor::Tensor;
use crate::{IMAGE_SIDE, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetName {
    Mnist,
    FashionMnist,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fmnist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mnist" => Some(Self::Mnist),
            "fmnist" | "fashion-mnist" | "f-mnist" => Some(Self::FashionMnist),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Gray-level images in `[0, 1]` with labels in `0..10`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: DatasetName,
    pub split: Split,
    images: Tensor,
    labels: Vec<u8>,
}

impl Dataset {
    /// Validates shape `[N, 1, 28, 28]`, pixel range and label range.
    pub fn new(name: DatasetName, split: Split, images: Tensor, labels: Vec<u8>) -> Result<Self> {
        check_images(&images)?;
        if images.shape()[0] != labels.len() {
            return Err(crate::error::dim_err!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            ));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(alloc::format!(
                "label {} at index {pos} outside 0..{NUM_CLASSES}",
                labels[pos]
            )));
        }
        Ok(Self {
            name,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `k` examples (all of them when `k >= len`).
    pub fn subset(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(usage_err!("subset size must be positive"));
        }
        let k = k.min(self.len());
        Ok(Self {
            name: self.name,
            split: self.split,
            images: self.images.slice_rows(0, k)?,
            labels: self.labels[..k].to_vec(),
        })
    }

    /// Replaces the images, keeping labels and identity.
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        Self::new(self.name, self.split, images, self.labels.clone())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let labels: Vec<u8> = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Batch {
            images: self.images.gather_rows(indices)?,
            onehot: one_hot(&labels),
            labels,
            indices: indices.to_vec(),
        })
    }

    /// Mini-batches in file order, or in a seeded permutation.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
        let order = batch_order(self.len(), batch_size, shuffle_seed)?;
        Ok(Batches {
            dataset: self,
            order,
            batch_size,
            cursor: 0,
        })
    }

    pub fn label_name(&self, label: u8) -> &'static str {
        const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
        const CLOTHES: [&str; 10] = [
            "T-shirt/top",
            "Trouser",
            "Pullover",
            "Dress",
            "Coat",
            "Sandal",
            "Shirt",
            "Sneaker",
            "Bag",
            "Ankle boot",
        ];
        match self.name {
            DatasetName::Mnist => DIGITS[label as usize],
            DatasetName::FashionMnist => CLOTHES[label as usize],
        }
    }
}

/// Index order for one epoch: identity, or a seeded shuffle.
pub fn batch_order(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(usage_err!("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut crate::rng::rng(seed));
    }
    Ok(order)
}

pub(crate) fn check_images(images: &Tensor) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != IMAGE_SIDE || s[3] != IMAGE_SIDE {
        return Err(crate::error::dim_err!(
            "expected images of shape [N, 1, {IMAGE_SIDE}, {IMAGE_SIDE}], got {s:?}"
        ));
    }
    check_unit_range(images)
}

pub(crate) fn check_unit_range(images: &Tensor) -> Result<()> {
    match images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Domain(alloc::format!("pixel value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// One-hot rows `[N, 10]`.
pub fn one_hot(labels: &[u8]) -> Tensor {
    let mut data = alloc::vec![0.0; labels.len().max(1) * NUM_CLASSES];
    for (row, &l) in data.chunks_exact_mut(NUM_CLASSES).zip(labels) {
        row[l as usize] = 1.0;
    }
    Tensor::new(&[labels.len().max(1), NUM_CLASSES], data).expect("one-hot shape")
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(values: &Tensor) -> Vec<u8> {
    let k = values.row_len();
    values
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// One mini-batch with both label encodings and the source indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub onehot: Tensor,
    pub labels: Vec<u8>,
    pub indices: Vec<usize>,
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        Some(self.dataset.batch(idx).expect("indices come from the dataset"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Short human-readable description, e.g. `mnist/test (10000)`.
pub fn describe(ds: &Dataset) -> String {
    alloc::format!("{}/{} ({})", ds.name, ds.split.as_str(), ds.len())
}
