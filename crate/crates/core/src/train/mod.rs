//! Loss, optimizer, training loop, evaluation and the direct-fit baseline.

pub mod adamw;
pub mod data;
pub mod direct;
pub mod eval;
pub mod loss;
pub mod trainer;

pub use adamw::{adamw_step, AdamState, AdamWConfig};
pub use data::{collate, DiskDataset, MemoryDataset, Sample, SampleSource};
pub use direct::{direct_fit, DirectFit, DirectFitConfig};
pub use eval::{evaluate, vertex_errors, EvalReport, SampleEval};
pub use loss::{loss, loss_and_grad, LossConfig, LossTerms, RigOperator};
pub use trainer::{
    epoch_order, iterations_per_epoch, read_log, total_steps, LogRow, TrainConfig, TrainSummary, Trainer,
};
