//! Twin-network multi-task learning: the eight ablation modes, their
//! losses, training and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{ExperimentMode, FusionOptions, LnPlacement, LossWeights, ModelSpec, NormOrder, SharingMode, TrainConfig};
pub use losses::{
    classification_loss, overall_loss, regression_loss, shared_layer_count, soft_sharing_penalty,
    soft_sharing_penalty_value, LossBreakdown,
};
pub use model::{argmax, FusionHead, ForwardOutput, Predictions, TwinModel};
pub use optim::Adam;
pub use train::{batch_tensor, evaluate, task_mask, train, EpochLog, Trainer};
