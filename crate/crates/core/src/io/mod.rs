//! Configuration, checkpoints, metrics and heatmap export.

pub mod checkpoint;
pub mod config;
pub mod fsutil;
pub mod metrics;
pub mod pgm;

pub use checkpoint::{Checkpoint, CheckpointEntry, TensorData};
pub use config::ExperimentConfig;
pub use metrics::{MetricsRow, CSV_HEADER};
