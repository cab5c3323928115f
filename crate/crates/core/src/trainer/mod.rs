//! Optimization, checkpoints, autoregressive generation and evaluation.

mod checkpoint;
mod inference;
mod optim;
mod train;

pub use checkpoint::{config_hash, LoadedModel};
pub use inference::{
    evaluate, evaluate_with, ms_to_frames, predict_autoregressive, zero_motion, EvalTable, PredictorOutput,
};
pub use optim::{adam_step, lr_schedule, AdamSettings, OptimizerState};
pub use train::{batch_tensors, window_mpjpe, EpochMetrics, TrainConfig, Trainer};
