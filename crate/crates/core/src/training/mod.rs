//! Cross-entropy pre-training, the learning-rate schedule, Adam and
//! self-critical fine-tuning.

mod adam;
mod loss;
mod schedule;
mod scst;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::cross_entropy_loss;
pub use schedule::{noam_lr, noam_lr_printed, ScheduleConfig};
pub use scst::{scst_loss, scst_step, RewardMetric, ScstConfig, ScstStepReport};
pub use trainer::{greedy_captions, mean_cider, MetricsRecord, TrainConfig, Trainer, TrainingData};
