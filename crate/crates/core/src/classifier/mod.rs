//! Second stage: a ConvNeXt that scores candidate crops as mitosis or not.

mod detector;
pub mod loss;
mod model;
mod train;

pub use detector::{extract_crop, keep_above, mitosis_probability, Candidate, Classifier};
pub use loss::{
    choose_positives, contrastive_loss, focal_loss, hybrid_loss, next_positives, total_loss, ContrastiveLoss, EmbeddingBatch, HybridGrad,
    HybridLossParams, LossBreakdown,
};
pub use model::{ClassifierConfig, ClassifierOutput, ConvNext};
pub use train::{label_candidates, mine_crops, train_classifier, write_classifier_history, ClassifierEpoch, ClassifierTrainConfig, CropSample};
