//! Self-distillation training: losses, schedules, EMA teacher, the train step and
//! checkpoints.

mod checkpoint;
mod engine;
mod loss;
mod optim;
mod schedule;

pub use checkpoint::{push_store, restore_store, teacher_from_checkpoint, Block, CheckpointBlob, FORMAT_VERSION, MAGIC};
pub use engine::{
    compute_losses, gradient_check, prepare_batch, sample_view_batch, step_rng, GradCheck, LossTerms, PreparedBatch,
    ScheduleState, StepReport, TrainConfig, Trainer,
};
pub use loss::{
    cross_entropy, cross_entropy_h, loss_color, loss_main, loss_main_probs, loss_mim, loss_shuffle, loss_total,
    loss_total_values, main_pair_count, LossWeights, Reduction, ViewId, PROB_FLOOR, TERM_NAMES,
};
pub use optim::AdamW;
pub use schedule::{ema_update, ema_update_slice, lambda_schedule, lr_schedule, teacher_temperature};
