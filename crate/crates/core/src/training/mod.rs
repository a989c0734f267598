//! Synthetic tasks and the three training regimes.

pub mod loss;
pub mod task;
pub mod trainer;

pub use loss::{
    ar_loss, diffusion_loss, diffusion_loss_with, loss_and_grads, noise_batch, LossAndGrads, NoiseLevel, Objective,
};
pub use task::{generate_dataset, Dataset, Example, TaskKind, TaskSpec, Vocab};
pub use trainer::{train, LogRow, LrSchedule, TrainConfig, TrainOutcome, TrainingLog};
