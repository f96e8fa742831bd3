//! Training with a merge-free warm-up, per-epoch cluster statistics,
//! evaluation and checkpoints.

mod checkpoint;
mod config;
mod optim;
mod stats;
mod train;

pub use checkpoint::{Checkpoint, EpochLog, MAGIC};
pub use config::{DataKind, OptimizerKind, TrainConfig};
pub use optim::OptimState;
pub use stats::{accuracy, mean_loss, Phase};
pub use train::{block_masks, evaluate, train, Evaluation, Trainer};
