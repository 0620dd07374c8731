//! Dense MLP classifier trained from scratch: manual backpropagation, SGD
//! with momentum, coupled L2 weight decay, step learning-rate decay and
//! optional mixup.

mod checkpoint;
pub(crate) mod loss;
mod mixup;
mod model;
mod train;

pub use checkpoint::{Checkpoint, ACTIVATION};
pub use loss::{loss_and_grads, LossSpec};
pub use mixup::{mix_pairs, mixup_batch};
pub use model::{init_model, Dense, MlpModel};
pub use train::{train, EpochLog, Objective, Sgd, TrainConfig, TrainFailure, TrainLog};
