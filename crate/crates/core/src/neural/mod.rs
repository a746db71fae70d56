//! CPU training and inference for the two small networks used by the detectors.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod nets;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Cache, Conv3x3, Dense, Layer, LayerKind, LayerSpec};
pub use loss::{class_weights, l1_loss, weighted_ce_loss};
pub use nets::{Arch, Classifier, Differentiable, LayerProbe, Network, Translator};
pub use tensor::{Scalar, Tensor4};
pub use train::{
    lr_at, train, train_with_progress, Dataset, InMemoryDataset, LossKind, LrSchedule, Targets,
    TrainConfig, TrainReport,
};
