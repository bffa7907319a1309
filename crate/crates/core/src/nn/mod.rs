//! Minimal neural-network engine: a fixed set of layers with forward,
//! backward, SGD with momentum and input gradients.

mod arch;
pub mod checkpoint;
mod layer;
mod model;
mod optim;

pub use arch::Architecture;
pub use layer::LayerSpec;
pub use model::{softmax_cross_entropy, ForwardTrace, Model, ModelParams, Sample};
pub use optim::sgd_step;
