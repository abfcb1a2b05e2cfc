//! IO, persistence and experiment orchestration around `spt-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod idx;
pub mod pipeline;
pub mod report;
pub mod sptfile;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use pipeline::Lab;
