//! Optimizer, schedule, datasets and the training loop.

pub mod data;
pub mod optim;
pub mod run;

pub use data::{augment, load_cifar100, synth_dataset, Dataset, Normalizer};
pub use optim::{adamw_step, cosine_lr, AdamW, OptimState, Schedule};
pub use run::{evaluate, train_loop, EpochRecord, EvalResult, Trainer};
