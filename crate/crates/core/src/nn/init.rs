use rand::Rng;

use crate::tensor::Tensor;

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Fan-in of a weight: product of every axis except the output axis.
///
/// Convolutions use `out × in × kh × kw`, transposed convolutions
/// `in × out × kh × kw`, linear layers `d_in × d_out`.
pub fn conv_fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

pub fn conv_transpose_fan_in(shape: &[usize]) -> usize {
    shape[0] * shape[2..].iter().product::<usize>()
}

pub fn linear_fan_in(shape: &[usize]) -> usize {
    shape[0]
}
