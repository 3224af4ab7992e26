//! Semi-supervised contrastive representation learning with semantic
//! positives drawn through k-NN pseudo-labels.
//!
//! Everything numeric is generic over [`Scalar`]; the `*64` / `*32`
//! aliases below pin the common precisions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod ndgrad;
pub mod nets;
pub mod objective;
pub mod optim;
pub mod plqueue;
pub mod scalar;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = ndgrad::Tensor<f64>;
pub type Tensor32 = ndgrad::Tensor<f32>;
pub type Tape64 = ndgrad::Tape<f64>;
pub type Tape32 = ndgrad::Tape<f32>;
pub type NetworkPair64 = nets::NetworkPair<f64>;
pub type NetworkPair32 = nets::NetworkPair<f32>;
pub type Dataset64 = synthdata::Dataset<f64>;
pub type Dataset32 = synthdata::Dataset<f32>;
pub type LabeledQueue64 = plqueue::LabeledQueue<f64>;
pub type QueueBank64 = plqueue::QueueBank<f64>;
pub type QueueBank32 = plqueue::QueueBank<f32>;
pub type Lars64 = optim::Lars<f64>;
pub type Lars32 = optim::Lars<f32>;
