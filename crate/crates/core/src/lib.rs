//! Data-free post-training quantization of small CNNs guided by
//! batch-normalization statistics at batch, class and image granularity.

pub mod archive;
pub mod autodiff;
pub mod bns;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod quant;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
