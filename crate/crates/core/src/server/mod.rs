//! Server-side stages: confident pseudo-sample generation from each uploaded
//! model, cross-client distillation on those samples, and parameter
//! aggregation.

mod aggregate;
mod distill;
mod noise;
mod noise_file;

pub use aggregate::aggregate;
pub use distill::{noise_distill, DistillConfig, DistillOutcome, DistillTrace};
pub use noise::{generate_noise_batch, NoiseBatch, NoiseGenConfig};
pub use noise_file::{read_noise_batch, write_noise_batch, NOISE_MAGIC};
