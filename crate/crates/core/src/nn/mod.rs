//! Differentiable layers built on the graph primitives.

mod gaussian;
pub mod init;
mod layers;

pub use gaussian::{kl_diag_gaussian, reparam_sample, GaussianParams, SIGMA_FLOOR};
pub use layers::{
    batch_norm, channel_modulate, conv2d, conv_transpose2d, cross_entropy, linear, log_softmax_rows,
    max_pool2d, mse, scaled_dot_product_attention, softmax_rows, Conv2dSpec,
};

/// Batch-norm epsilon used throughout the models.
pub const BN_EPS: f64 = 1e-5;
