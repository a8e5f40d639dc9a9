//! Multilayer perceptron with ReLU hidden layers, inverted dropout, and
//! hand-derived gradients for parameters and inputs.

mod format;
mod mlp;

pub use format::{deserialize, serialize, MODEL_MAGIC, MODEL_VERSION};
pub use mlp::{Dense, DenseGrad, ForwardCache, ForwardMode, Gradients, MlpModel};
