//! Loss assembly, the training loop, and segmentation metrics.

mod loss;
mod metrics;
mod trainer;

pub use loss::{build_supervision, multi_stage_loss, LossReport, Supervision};
pub use metrics::{ConfusionMatrix, Metrics};
pub use trainer::{
    evaluate, resolve_threads, train, EpochRecord, TrainOptions, TrainRun, LOG_CSV_HEADER,
};
