//! Fine-tuning policies, Adam with a cosine schedule, and the training loop.

mod engine;
mod optim;
mod policy;
mod pretrain;

pub use engine::{evaluate, softmax_cross_entropy, train, TrainConfig, TrainReport};
pub use optim::{adam_step, adam_step_sparse, cosine_lr, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use policy::{apply_policy, FineTunePolicy, TrainablePlan};
pub use pretrain::{pretrain_source, SourcePretrain};
