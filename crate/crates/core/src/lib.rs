//! Point cloud anomaly detection by few-step consistency-model reconstruction.

pub mod config;
pub mod error;
pub mod eval;
pub mod inference;
pub mod network;
pub mod numerics;
pub mod patchgen;
pub mod pointcloud;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
pub use config::RunConfig;
pub use inference::{AnomalyReport, SamplerConfig};
pub use network::{ConsistencyModel, ModelConfig};
pub use pointcloud::{Label, Point3, PointCloud};
pub use training::{LossVariant, TrainConfig};
