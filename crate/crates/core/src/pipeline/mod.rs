//! Data ingestion, augmentation, optimisation, training and inference.

mod adam;
mod augment;
mod config;
mod data;
mod infer;
mod suite;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment, augment_with, sample_augment, AugmentRecord};
pub use config::TrainConfig;
pub use data::{
    load_image, load_pairs, load_sparse_disparity, read_manifest, save_image, save_sparse_disparity, write_pgm16, write_pgm8,
    StereoSample,
};
pub use infer::{evaluate, gt_path_for, image_metrics, infer_image, pad_to_multiple, write_inference, EvalOptions, Inference};
pub use train::{checkpoint_path, train, StepLog, TrainOutcome, Trainer, LOG_FILE, LOG_HEADER};
pub use suite::{gradient_cases, run_gradient_suite, GradCase, SUITE_EPS, SUITE_TOL};
