//! Synthetic multi-task scenes, their labels, frozen predictors and metrics.

pub mod dataset;
pub mod metrics;
pub mod predictor;
pub mod scene;

pub use dataset::{build_split, Dataset, DatasetConfig, Labels, Split};
pub use metrics::{task_loss, task_metric, MetricAccumulator};
pub use predictor::{pretrain_predictors, PredictorBank, PredictorOptions};
pub use scene::{generate_scene, Scene, NUM_PARTS};
