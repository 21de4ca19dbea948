//! First-stage candidate proposer: a YOLO11-style detector with LSConv in
//! the neck outputs, EMA attention in C2PSA and on each head input.

mod assign;
mod config;
mod detector;
mod head;
mod loss;
mod model;
mod train;

pub use assign::{assign, Assignment, TalConfig, Xyxy};
pub use config::{ProposerConfig, STRIDES};
pub use head::FlatPredictions;
pub use loss::{assign_batch, ciou, ciou_grad, detection_loss, loss_with_assignment, DetectionLoss, ImageAssignment, LossParts};
pub use model::{AuditEntry, AuditSummary, HeadLevel, LevelOutput, ProposerModel, Sppf};
pub use detector::Proposer;
pub use train::{random_crop, train_proposer, write_proposer_history, ProposerEpoch, ProposerTrainConfig};
