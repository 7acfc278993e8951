//! Loss terms, the AdamW optimizer, the warmup + cosine schedule and the
//! teacher-forced training loop.

mod check;
mod loss;
mod optim;
mod schedule;
mod train;

pub use check::{check_loss_gradients, check_variants, VariantCheck};
pub use loss::{forward_trial, loss_token, loss_txt, loss_xy, slot_accuracy, LossBreakdown, LossVars, TrialForward};
pub use optim::{optimizer_step, AdamState, AdamWConfig};
pub use schedule::{lr_at, Schedule, WARMUP_START_FACTOR};
pub use train::{
    evaluate_losses, train, train_model, trial_gradients, EpochRecord, EvalStats, StepRecord, TrainConfig, TrainLog,
    TrainOutcome,
};
