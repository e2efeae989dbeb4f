//! Unsupervised image anomaly detection by adapting an attention-augmented
//! patch descriptor towards a bank of per-position centers, with a
//! differentiable top-k selection solved by entropic optimal transport.

pub mod ablation;
pub mod adaptation;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod optim;
pub mod pipeline;
pub mod scoring;
pub mod soft_topk;

pub use error::{AdfaError, Result};
