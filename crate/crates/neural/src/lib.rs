//! Reverse-mode differentiation on dense 3-D feature maps, the U-Net family
//! built on it, and a deterministic training loop.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod graph;
mod kernels;
pub mod network;
pub mod predictor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{Graph, Tensor, Var};
pub use network::{
    layout, parameter_count, parameter_report, FilterBlockKind, Network, NetworkConfig, ParameterReport,
};
pub use predictor::{NetPredictor, SegmentationModel};
pub use train::{train, EarlyStop, PatchSampling, Sample, TrainConfig, TrainLog};

use netseg_core::metrics::MetricError;
use netseg_core::volume::VolumeError;

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{channels} channels cannot be split into {groups} groups")]
    BadGroupCount { channels: usize, groups: usize },
    #[error("spatial dims {shape:?} not divisible by {divisor}")]
    IndivisibleShape { shape: [usize; 3], divisor: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss {loss} at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: String, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
