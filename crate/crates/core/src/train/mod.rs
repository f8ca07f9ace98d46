//! Optimization: Adam, plateau learning-rate decay, the epoch loop,
//! cross-validation, checkpoints and evaluation.

mod adam;
mod checkpoint;
mod config;
mod plateau;
mod trainer;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, TrainerState, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC};
pub use config::{AugmentConfig, TrainConfig};
pub use plateau::{PlateauTracker, IMPROVEMENT_THRESHOLD};
pub use trainer::{
    cross_validate, evaluate, predict_labels, prepare_case, train_fold, CaseSet, CvReport, EpochRecord, FoldOutcome,
    FoldReport, PreparedCase, Trainer,
};
