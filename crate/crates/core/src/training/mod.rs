//! Model assembly, optimization, evaluation, checkpoints and gradient checks.

mod checkpoint;
mod gradcheck;
mod metrics;
mod model;
mod optim;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck, gradcheck_model, GradcheckReport, LossFn, TensorCheck, REL_ERR_FLOOR};
pub use metrics::{ClassMetrics, Metrics};
pub use model::{AblationFlags, Batch, ForwardPass, FusionModel, Head, ModelConfig};
pub use optim::{AdamW, OptimizerState};
pub use train::{
    evaluate, gate_summary, history_csv, predict, split_indices, train, train_on, EpochRecord, HistoryRow, Split,
    TrainConfig, TrainOutcome, HISTORY_HEADER,
};
