//! Optimizer, schedules and the training loop.

mod optim;
mod schedule;
mod trainer;

pub use optim::{AdamW, Moments, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{schedules, Schedule, TrainConfig};
pub use trainer::{RngState, StepMetrics, Trainer};
