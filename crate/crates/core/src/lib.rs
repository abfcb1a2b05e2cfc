//! Numeric core for structure-preserving transformation (SPT) attacks.
//!
//! Everything here is pure computation over in-memory tensors: a small
//! reverse-mode autodiff engine, the five reference classifiers, the SPT
//! gray-level transform and its training loop, FGSM/PGD with PGD
//! adversarial training, and the evaluation metrics. File formats, data
//! loading and the command line live in the `spt-lab` crate.
//!
//! The crate is `no_std` (with `alloc`) unless the default `std` feature is
//! enabled; `std` only switches on runtime SIMD detection in the matrix
//! kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod rng;
pub mod spt;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Number of classes in every supported dataset.
pub const NUM_CLASSES: usize = 10;
/// Side length of the square gray-level input images.
pub const IMAGE_SIDE: usize = 28;
