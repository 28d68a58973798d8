//! Central finite differences, used as an independent oracle for backward.

use super::graph::Graph;
use super::value::Tensor;
use super::Var;
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Per-element `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_difference_gradient", "eps must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?.item()?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?.item()?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("relative_error", a.shape(), b.shape()));
    }
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-300 {
        return Ok(0.0);
    }
    Ok(diff / scale)
}

/// Relative error between backward and finite differences for every input of
/// the scalar function built by `build`.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |probe| {
                let mut g = Graph::new();
                let vars = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.param(if j == i { probe.clone() } else { t.clone() }))
                    .collect::<Result<Vec<_>>>()?;
                let out = build(&mut g, &vars)?;
                Ok(g.value(out).clone())
            },
            &inputs[i],
            eps,
        )?;
        errors.push(relative_error(&grads.get(*var), &numeric)?);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_gradient(
            |x| Ok(Tensor::scalar(x.data()[0] * x.data()[0])),
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn linear_is_exact_and_constant_is_zero() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let g = finite_difference_gradient(|x| Ok(Tensor::scalar(x.sum())), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
        let z = finite_difference_gradient(|_| Ok(Tensor::scalar(7.0)), &x, 1e-5).unwrap();
        assert_eq!(z.data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_output_errors() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(finite_difference_gradient(|x| Ok(x.clone()), &x, 1e-5).is_err());
        assert!(finite_difference_gradient(|x| Ok(Tensor::scalar(x.sum())), &x, 0.0).is_err());
    }
}
