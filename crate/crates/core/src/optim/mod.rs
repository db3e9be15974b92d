//! AdamW, the warmup/cosine schedule, checkpoints and the training loops.

mod adamw;
mod checkpoint;
mod schedule;
mod train;

pub use adamw::{adamw_step, AdamW, AdamWConfig};
pub use checkpoint::{
    diff_checkpoints, load_checkpoint, load_into, load_parameters, read_checkpoint, save_checkpoint, Checkpoint, Manifest,
    OptimizerEcho, TensorEntry, CHECKPOINT_MAGIC,
};
pub use schedule::{lr_at, LrSchedule};
pub use train::{
    evaluate_classifier, evaluate_pretext, head_features, metrics_csv, prepare_for_finetune, pretrain, train_supervised,
    CheckpointPlan, MetricsRow, PretextConfig, PretrainReport, SupervisedReport, TrainConfig, METRICS_HEADER,
};
