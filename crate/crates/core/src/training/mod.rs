//! Losses, optimizer and the training and distillation loops. Gradients
//! come from [`Model::backward`](crate::model::Model::backward); sign sites
//! use the straight-through estimator.

mod config;
mod distill;
mod loss;
mod optim;
mod ste;
mod trainer;

pub use config::{Augment, DistillConfig, LogitMatching, LspConfig, TrainConfig, TrainStage};
pub use distill::{cascaded_distillation, CascadeConfig, CascadeObserver, CascadeResult};
pub use loss::{cross_entropy, logit_matching_loss, lsp_loss, lsp_loss_grad, lsp_vectors, LossValue, LspSimilarity};
pub use optim::{adam_step, Decay, LrSchedule, TrainState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use ste::{latent_weight_maintenance, ste_sign_backward};
pub use trainer::{evaluate, predict_indices, train, Evaluation, MetricRecord, TrainObserver, TrainReport};
