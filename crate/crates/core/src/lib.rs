pub mod artifacts;
pub mod baselines;
pub mod csm;
pub mod data;
pub mod error;
pub mod fl;
pub mod fsc;
pub mod harness;
pub mod nn;
pub mod pfe;
pub mod privacy;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
