//! Accuracy metrics, attention maps and the evaluation harnesses.

mod attention;
mod harness;
mod metrics;

pub use attention::{attention_map, AttentionMap, AttnMethod};
pub use harness::{
    ablation_csv, epoch_sweep_csv, run_ablations, run_epoch_sweep, run_freeze_sweep, run_semisupervised, run_transfer, semisup_csv,
    sweep_csv, Ablation, AblationRow, EpochSweepRow, Experiment, SemiSupervisedRow, SweepRow, TransferInit, EPOCH_SWEEP_HEADER,
    SEMISUP_HEADER, SWEEP_HEADER,
};
pub use metrics::topk_accuracy;
