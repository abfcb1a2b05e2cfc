//! Classifier architectures, parameters, inference and supervised training.

mod arch;
mod classifier;
mod train;

pub use arch::{ArchitectureId, ArchitectureSpec, Layer, ParamShape};
pub use classifier::{ClassifierModel, ModelForward, NamedParam, TrainingMeta, INIT_BIAS, INIT_STD};
pub use train::{train_classifier, Progress, TrainConfig, TrainReport, Trainer};
