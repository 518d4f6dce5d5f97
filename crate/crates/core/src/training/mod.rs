//! Losses, augmentation and the two training stages.

pub mod augment;
pub mod losses;
pub mod trainer;

pub use augment::{augment, AugmentationConfig};
pub use losses::{
    classify_pairs, coarse_pairing_loss, dynamic_seg_loss_ohem, importance_scoring_loss, offset_loss, ohem_select,
    pairing_loss, total_registration_loss, LossComponents, LossWeights, OhemSelection, PairClassification,
};
pub use trainer::{
    train_loop_head, train_registration, write_loss_csv, LoopReport, TrainReport, TrainingConfig, TrainingPair,
};
