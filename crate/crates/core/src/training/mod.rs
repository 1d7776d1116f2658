//! Joint training: configuration, model, epoch loop, checkpoints and run artifacts.

pub mod artifacts;
pub mod checkpoint;
mod config;
mod model;
pub mod pipeline;
mod trainer;

pub use config::{
    ablate, apply_override, interpolate_env, Ablation, DataConfig, DiffusionConfig,
    EmbeddingProvider, Framework, LossWeights, ModelConfig, RegularizerSchedule, RunConfig,
    SemanticsConfig, TrainConfig,
};
pub use model::{Forward, Model, ModelIds, Regularizers};
pub use trainer::{
    epoch_step, evaluate_logs, load_best, train, train_from, train_with_hook, BestState, EpochHook,
    EpochRecord, TrainData, TrainOutcome, TrainState,
};
