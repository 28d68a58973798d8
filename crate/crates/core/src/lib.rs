//! Meta-learning engine: tensors with reverse-mode autodiff, layers, models,
//! episodic meta-training and synthetic task data.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
