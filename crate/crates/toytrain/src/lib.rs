//! Desk-scale training harness: synthetic shapes, a two-stream network
//! trained from image-level labels, and IoU evaluation.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod net;
pub mod train;

pub use dataset::{gen_dataset, Dataset, Sample, ToyDatasetConfig};
pub use error::{Result, ToyError};
pub use metrics::{eval_iou, LossCurves, Metrics};
pub use net::{GateMode, NetConfig};
pub use train::{predict, run_experiment, train, ExperimentConfig, ExperimentReport, Model, TrainConfig};
