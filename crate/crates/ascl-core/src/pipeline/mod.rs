//! Training loop, evaluation suite, and the gradient-check harness.

mod config;
mod eval;
mod gradcheck;
mod train;

pub use config::{Ablation, LrSchedule, NoiseKind, TrainConfig};
pub use eval::{
    alignment_metric, evaluate, length_bucket_eval, recall_at_k, uniformity_metric, EvalOptions,
    EvalReport, LengthBucketReport, RecallTriple, UniformityStats, DEFAULT_LENGTH_BUCKETS,
};
pub use gradcheck::{
    gradient_check, GradCheckReport, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use train::{train, write_training_log, TrainLogEntry, TrainOutcome};
