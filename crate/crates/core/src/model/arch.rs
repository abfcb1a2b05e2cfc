//! The five reference architectures.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{usage_err, Result};
use crate::{IMAGE_SIDE, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArchitectureId {
    Cp,
    Ca0,
    Ca1,
    Ca2,
    Ca3,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 5] = [Self::Cp, Self::Ca0, Self::Ca1, Self::Ca2, Self::Ca3];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cp => "C_p",
            Self::Ca0 => "C_a0",
            Self::Ca1 => "C_a1",
            Self::Ca2 => "C_a2",
            Self::Ca3 => "C_a3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "c_p" | "cp" => Ok(Self::Cp),
            "c_a0" | "ca0" => Ok(Self::Ca0),
            "c_a1" | "ca1" => Ok(Self::Ca1),
            "c_a2" | "ca2" => Ok(Self::Ca2),
            "c_a3" | "ca3" => Ok(Self::Ca3),
            _ => Err(usage_err!(
                "unknown architecture {s:?}; expected one of C_p, C_a0, C_a1, C_a2, C_a3"
            )),
        }
    }

    /// Stream tag mixed into the initialization seed, so equal experiment
    /// seeds still give C_p and C_a0 different weights.
    pub(crate) fn seed_tag(self) -> u64 {
        0xC1A5_5000 + self as u64
    }

    pub fn spec(self) -> ArchitectureSpec {
        ArchitectureSpec::of(self)
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// `filters` feature maps, `kernel x kernel` window, SAME padding.
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Square window, stride equal to the window.
    MaxPool {
        size: usize,
    },
    /// Fully connected; flattens spatial input first.
    Fc {
        units: usize,
    },
    Softmax,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv {
                filters,
                kernel,
                stride,
            } => write!(f, "Conv({filters},{kernel},{kernel},{stride})"),
            Layer::Relu => f.write_str("ReLU"),
            Layer::MaxPool { size } => write!(f, "MaxPool({size},{size})"),
            Layer::Fc { units } => write!(f, "FC({units})"),
            Layer::Softmax => f.write_str("Softmax"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub id: ArchitectureId,
    pub layers: Vec<Layer>,
}

/// Shape of a named parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: alloc::string::String,
    pub shape: Vec<usize>,
}

impl ArchitectureSpec {
    pub fn of(id: ArchitectureId) -> Self {
        use Layer::*;
        let conv = |filters, kernel| Conv {
            filters,
            kernel,
            stride: 1,
        };
        let pool = MaxPool { size: 2 };
        let layers = match id {
            // C_a0 differs from C_p only by its initialization.
            ArchitectureId::Cp | ArchitectureId::Ca0 => vec![
                conv(32, 5),
                Relu,
                pool,
                conv(64, 5),
                Relu,
                pool,
                Fc { units: 1024 },
                Relu,
                Fc { units: NUM_CLASSES },
                Softmax,
            ],
            ArchitectureId::Ca1 | ArchitectureId::Ca2 => {
                let k = if id == ArchitectureId::Ca1 { 4 } else { 3 };
                vec![
                    conv(32, k),
                    Relu,
                    pool,
                    conv(32, k),
                    Relu,
                    pool,
                    conv(64, k),
                    Relu,
                    Fc { units: 1024 },
                    Relu,
                    Fc { units: NUM_CLASSES },
                    Softmax,
                ]
            }
            ArchitectureId::Ca3 => vec![
                conv(32, 3),
                Relu,
                pool,
                Fc { units: 1024 },
                Relu,
                Fc { units: 512 },
                Relu,
                Fc { units: NUM_CLASSES },
                Softmax,
            ],
        };
        Self { id, layers }
    }

    /// Parameter tensors implied by the layers and a `1 x 28 x 28` input.
    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let (mut c, mut h, mut w) = (1usize, IMAGE_SIDE, IMAGE_SIDE);
        let mut flat: Option<usize> = None;
        let (mut convs, mut fcs) = (0, 0);
        for layer in &self.layers {
            match *layer {
                Layer::Conv {
                    filters,
                    kernel,
                    stride,
                } => {
                    convs += 1;
                    out.push(ParamShape {
                        name: alloc::format!("conv{convs}.weight"),
                        shape: vec![filters, c, kernel, kernel],
                    });
                    out.push(ParamShape {
                        name: alloc::format!("conv{convs}.bias"),
                        shape: vec![filters],
                    });
                    c = filters;
                    h = h.div_ceil(stride);
                    w = w.div_ceil(stride);
                }
                Layer::MaxPool { size } => {
                    h = (h - size).div_ceil(size) + 1;
                    w = (w - size).div_ceil(size) + 1;
                }
                Layer::Fc { units } => {
                    fcs += 1;
                    let d = flat.unwrap_or(c * h * w);
                    out.push(ParamShape {
                        name: alloc::format!("fc{fcs}.weight"),
                        shape: vec![d, units],
                    });
                    out.push(ParamShape {
                        name: alloc::format!("fc{fcs}.bias"),
                        shape: vec![units],
                    });
                    flat = Some(units);
                }
                Layer::Relu | Layer::Softmax => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{layer}")?;
        }
        Ok(())
    }
}
