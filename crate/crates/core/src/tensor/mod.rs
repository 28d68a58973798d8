//! Dense tensors, reverse-mode differentiation and first-order optimizers.

mod check;
mod graph;
pub mod kernels;
mod optim;
mod value;

pub use check::{check_gradients, finite_difference_gradient, relative_error, DEFAULT_FD_EPS};
pub use graph::{forward_eval, Gradients, Graph, Var};
pub use optim::{sgd_step, OptimState, StepRule};
pub use value::Tensor;


