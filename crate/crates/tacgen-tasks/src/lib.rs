//! Downstream consumers of the tactile generator: augmentation pipelines
//! that synthesize labelled datasets from a single reference contact,
//! force/pose/class estimators that measure how useful those datasets are,
//! and generation-quality reporting.

pub mod augment;
pub mod classify;
pub mod data;
pub mod error;
pub mod eval;
pub mod force;
pub mod pose;
pub mod transform;
pub mod vit;
pub mod weights;

pub use augment::{force_augment, full_augment, sample_transform_grid, AugmentConfig, AugmentReport};
pub use classify::{
    classification_accuracy, classify, cnn_flatten_width, train_classifier, ClassifierKind,
    ClassifierTrainConfig,
};
pub use data::{class_vocab, image_to_input, load_task_items, TaskItem};
pub use error::{Result, TaskError};
pub use eval::{eval_generation, GenEvalEntry};
pub use force::{force_mae, predict_force, train_force_estimator};
pub use pose::{pose_errors, predict_pose, train_pose_estimator, PoseTrainConfig};
pub use transform::{traditional_augment, traditional_count, TraditionalMode};
pub use vit::VitConfig;
pub use weights::{EstimatorMeta, EstimatorTrainConfig, EstimatorWeights, TaskTag};
