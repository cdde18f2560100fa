//! Patch-based axial transformer surrogate: model, training, checkpoints.

mod checkpoint;
mod config;
mod gradcheck;
#[macro_use]
mod layers;
mod loss;
mod model;
mod normalizer;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TrainingMeta,
    CHECKPOINT_MAGIC,
};
pub use config::ModelConfig;
pub use gradcheck::{gradient_check, tolerance, GradCheckReport, Probe};
pub use loss::mse_loss;
pub use model::{ForwardOutput, InjectFn, Injector, Surrogate};
pub use normalizer::Normalizer;
pub use train::{evaluate, train, train_with_progress, Optimizer, TrainOptions, WindowSet};
