//! Augmentation, optimizer, learning-rate schedule, and the training loop.

mod augment;
mod optim;
mod schedule;
mod train;

pub use augment::{augment, sample_seed, AugmentConfig};
pub use optim::{sgd_step, Sgd};
pub use schedule::{lr_at, LrSchedule, LR_FLOOR};
pub use train::{pretrain, PretrainOutput, StepRecord, TrainConfig, TrainState, Trainer};

#[cfg(test)]
mod tests;
