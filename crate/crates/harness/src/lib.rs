//! Training harness: run configuration, the training loop, metrics,
//! probes, checkpoints, experiment drivers and report emission.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{HarnessError, Result};
pub use trainer::Trainer;

pub type Trainer64 = trainer::Trainer<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
