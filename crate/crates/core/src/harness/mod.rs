//! Desk-scale training harness: synthetic tasks, small models with
//! hand-derived per-sample gradients, a ground-truth gradient oracle, and
//! the SGD loop with a pluggable privatize/compress/denoise pipeline.

mod model;
mod oracle;
mod task;
mod train;

pub use model::{per_sample_gradients, Architecture, ModelSpec};
pub use oracle::{oracle_stream, split_layout, OracleSpec, OracleStream};
pub use task::{Dataset, Generator, TaskSpec};
pub use train::{
    final_accuracy, run_training, ClipSetting, DenoiseSettings, PipelineConfig, PrivacySettings,
    RunMeta, RunRecord, TrainConfig, TrainingRun,
};
