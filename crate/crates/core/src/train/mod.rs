//! Optimizer, per-night training loop and the three-phase gated pipeline.

mod adam;
mod options;
mod pipeline;
mod run;

pub use adam::{adam_step, clip_grad_norm, AdamState, ADAM_EPS, BETA1, BETA2};
pub use options::{Schedule, TrainOptions};
pub use pipeline::{expand_backbone, resume_gated_pipeline, train_gated_pipeline, GateOptions, PipelineOutput};
pub use run::{
    effective_config, loss_and_grads, seed_mix, train, train_epochs, train_with, EpochLog, EpochObserver, StepLoss,
    StepResult, TrainLog, TrainState,
};
