//! Training loop, checkpoints, benchmarking and the ablation workflow.

mod ablate;
mod bench;
mod checkpoint;
mod config;
mod init;
mod record;
mod trainer;

pub use ablate::{ablate, AblationData, AblationReport, ArmResult, ArmSpec, EqualTime, ARMS};
pub use bench::{bench, median, ArmTiming, BenchReport, BENCH_WARMUP};
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{InitPolicy, TrainConfig};
pub use init::{init_from_checkpoint, InitReport};
pub use record::StepRecord;
pub use trainer::{
    checkpoint_path, eval_loss, StepLog, Trainer, CHECKPOINT_DIR, FINAL_CHECKPOINT, STEP_LOG,
};
