//! MZNet image demoiréing.
//!
//! Network blocks and assembly, cost accounting, synthetic moiré data,
//! training, metrics, checkpoints and configuration, built on the
//! `mznet-tensor` engine.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use model::{select_kernel_size, ForwardOutput, KernelSize, Model, ModelConfig, TlcSpec};
pub use params::{Bound, Ctx, ParamInit, Params, Pooling};
