//! Burn-in, batch composition, the combined training step, teacher
//! maintenance and method presets.

mod batch;
mod burnin;
mod config;
mod presets;
mod run;
mod step;

pub use batch::{compose_batch, DataStream, Minibatch};
pub use burnin::{burn_in, evaluate, BurninResult, BurninSummary};
pub use config::{batch_split, BurnIn, Pipelines, TeacherUpdate, TrainConfig};
pub use presets::{target_augmentations, MethodPreset, BURN_IN_FRACTION};
pub use run::{dataset_fingerprint, run_preset, run_training, IterationLog, RunOptions, TrainingRun};
pub use step::{
    LossBundle, StepOutput, TrainState, Trainer, ALIGN_IMAGE_NAME, ALIGN_INSTANCE_NAME, HARD_DISTILL_NAMES,
};
