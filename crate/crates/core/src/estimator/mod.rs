//! Learned pairwise MI head over frozen backbone hidden states, its
//! training data, and its training loop.

mod dataset;
mod head;
mod train;

pub use dataset::{
    build_mi_dataset, load_mi_dataset, read_example, save_mi_dataset, sidecar_path, write_example, MiDatasetMeta,
    MiExample, DATASET_FORMAT_VERSION,
};
pub use head::{estimator_loss, EstimatorConfig, MiEstimator, MiPredictor};
pub use train::{
    constant_baseline_mse, pooled_mse, split_by_group, train_estimator, EpochStats, EstimatorReport,
    EstimatorTrainConfig,
};
