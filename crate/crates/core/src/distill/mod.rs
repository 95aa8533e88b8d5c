//! Collaborative transfer: source fine-tuning, F1 (source → per-modality
//! auxiliaries) and F2 (auxiliaries + source → early-fusion target), with
//! the information-regulation weighting switchable in F2.
//!
//! Teachers are only ever borrowed immutably; their checksums are recorded
//! before and after each stage.

mod checkpoint;
mod pseudo;
mod trainer;
mod transfer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use pseudo::{
    argmax, generate_pseudo_labels, one_hot, predict, predict_logits, LabelMode, PseudoLabel,
};
pub use trainer::{
    accuracy, fine_tune_source, fit, fit_with, train_supervised, BatchPos, FineTuneConfig,
    StageHistory, TrainConfig,
};
pub use transfer::{
    f2_loss_and_grad, predict_fused, teacher_targets, train_auxiliaries_f1, train_target_f2,
    ChannelLog, F1Config, F1Output, F2Config, F2LossBreakdown, F2Output, TeacherSet,
    TeacherTargets,
};
