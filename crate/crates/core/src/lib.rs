//! Graph mixture-of-experts anomaly detection for multivariate time series.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod flow;
pub mod graph;
pub mod ingest;
pub mod memory;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
