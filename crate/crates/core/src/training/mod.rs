//! Optimization: the training regimes, Adam, and downstream bias finetuning.
//!
//! Every step trains on a batch drawn from a single task; tasks are visited
//! in strict round-robin order. The loss is the mean absolute error between
//! the model output and the clean image.

mod config;
mod metrics;
mod optim;
mod trainer;

pub use config::{LossKind, LrSchedule, Regime, TrainConfig};
pub use metrics::{metrics_to_jsonl, psnr_table, write_metrics, MetricRecord};
pub use optim::{OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{
    downstream_finetune, evaluate, full_finetune, run_regime, run_regime_from, train_step, validation_set,
    DownstreamOutcome, StepOutcome, TrainOutcome, TrainableSet, Trainer, ValResult,
};

#[cfg(test)]
mod tests;
