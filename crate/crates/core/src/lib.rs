//! Two-step disentanglement of image codes into class-specified and
//! unspecified parts, and classifier training augmented with decoded mixtures
//! of specified codes across classes.

pub mod autograd;
pub mod dataset;
pub mod error;
pub mod harness;
mod kernels;
pub mod mixture;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
