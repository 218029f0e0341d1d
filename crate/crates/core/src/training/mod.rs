//! Pretraining loop, optimizer, learning-rate schedule, checkpoints and ablation sweeps.

mod ablation;
mod checkpoint;
mod config;
mod optim;
mod pretrain;

pub use ablation::{run_ablation, Knob, SweepEvent, SweepSpec, RESULTS_FILE};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{PositivePair, TrainConfig};
pub use optim::{clip_grad_norm, AdamW, LrSchedule};
pub use pretrain::{
    objective, prepare_sample, pretrain, EpochStats, PreparedSample, PretrainOutcome, TraceRow, EPOCHS_FILE,
    FINAL_CHECKPOINT, TRACE_FILE,
};
