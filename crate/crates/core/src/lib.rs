//! Federated learning simulator with client-side self-distillation and
//! server-side distillation on synthesized pseudo-samples, plus a plain
//! FedAvg baseline.

mod codec;

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod finite_diff;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod prob;
pub mod rng;
pub mod server;
pub mod strategy;
pub mod tensor;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
