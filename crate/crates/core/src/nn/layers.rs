use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Var};

/// Shape contract of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
        }
    }

    /// Spatial output of a forward convolution: `floor((H + 2·pad − kh)/stride) + 1`.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 || h + 2 * self.padding < kh || w + 2 * self.padding < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("no valid output for {h}x{w} input with {kh}x{kw} kernel, pad {}", self.padding),
            ));
        }
        Ok((
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        ))
    }

    /// Spatial output of the transposed convolution: `(H − 1)·stride − 2·pad + kh`.
    pub fn transposed_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let oh = ((h - 1) * self.stride + kh) as isize - 2 * self.padding as isize;
        let ow = ((w - 1) * self.stride + kw) as isize - 2 * self.padding as isize;
        if self.stride == 0 || oh < 1 || ow < 1 {
            return Err(Error::invalid(
                "conv_transpose2d",
                format!("no valid output for {h}x{w} input"),
            ));
        }
        Ok((oh as usize, ow as usize))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    /// Weight layout of the transposed layer, `in × out × kh × kw`.
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel.0, self.kernel.1]
    }
}

fn add_channel_bias(g: &mut Graph, y: Var, bias: Var, channels: usize) -> Result<Var> {
    if g.shape(bias) != [channels] {
        return Err(Error::shape("bias", g.shape(bias), &[channels]));
    }
    let b = g.reshape(bias, &[1, channels, 1, 1])?;
    g.add_b(y, b)
}

fn check_channels(g: &Graph, input: Var, expected: usize, op: &'static str) -> Result<()> {
    let s = g.shape(input);
    if s.len() != 4 || s[1] != expected {
        return Err(Error::invalid(op, format!("expected N×{expected}×H×W input, got {s:?}")));
    }
    Ok(())
}

/// Cross-correlation with optional per-channel bias.
pub fn conv2d(g: &mut Graph, input: Var, spec: &Conv2dSpec, weight: Var, bias: Option<Var>) -> Result<Var> {
    check_channels(g, input, spec.in_channels, "conv2d")?;
    if g.shape(weight) != spec.weight_shape() {
        return Err(Error::shape("conv2d", g.shape(weight), &spec.weight_shape()));
    }
    let s = g.shape(input);
    spec.output_extent(s[2], s[3])?;
    let y = g.conv2d(input, weight, spec.stride, spec.padding)?;
    match bias {
        Some(b) => add_channel_bias(g, y, b, spec.out_channels),
        None => Ok(y),
    }
}

/// Transposed convolution; `weight` has layout `in × out × kh × kw`.
pub fn conv_transpose2d(
    g: &mut Graph,
    input: Var,
    spec: &Conv2dSpec,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    check_channels(g, input, spec.in_channels, "conv_transpose2d")?;
    if g.shape(weight) != spec.transposed_weight_shape() {
        return Err(Error::shape("conv_transpose2d", g.shape(weight), &spec.transposed_weight_shape()));
    }
    let s = g.shape(input);
    let out_hw = spec.transposed_extent(s[2], s[3])?;
    let y = g.conv_transpose2d(input, weight, spec.stride, spec.padding, out_hw)?;
    match bias {
        Some(b) => add_channel_bias(g, y, b, spec.out_channels),
        None => Ok(y),
    }
}

/// Batch normalization with statistics of the current batch only.
///
/// Biased per-channel variance over `N·H·W`; no running averages are kept.
pub fn batch_norm(g: &mut Graph, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let s = g.shape(input).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("batch_norm", format!("expected NCHW input, got {s:?}")));
    }
    if s[0] < 2 {
        return Err(Error::invalid("batch_norm", "batch statistics need at least 2 samples"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("batch_norm", "eps must be positive"));
    }
    let c = s[1];
    let count = (s[0] * s[2] * s[3]) as f64;
    let stat_shape = [1, c, 1, 1];
    let total = g.sum_to(input, &stat_shape)?;
    let mean = g.scale(total, 1.0 / count)?;
    let centered = g.sub_b(input, mean)?;
    let sq = g.mul(centered, centered)?;
    let sq_total = g.sum_to(sq, &stat_shape)?;
    let var = g.scale(sq_total, 1.0 / count)?;
    let var_eps = g.add_scalar(var, eps)?;
    let inv_std = g.powf(var_eps, -0.5)?;
    let normalized = g.mul_b(centered, inv_std)?;
    let gamma = reshape_channels(g, gamma, c, "batch_norm")?;
    let beta = reshape_channels(g, beta, c, "batch_norm")?;
    let scaled = g.mul_b(normalized, gamma)?;
    g.add_b(scaled, beta)
}

fn reshape_channels(g: &mut Graph, v: Var, c: usize, op: &'static str) -> Result<Var> {
    if g.shape(v) != [c] {
        return Err(Error::shape(op, g.shape(v), &[c]));
    }
    g.reshape(v, &[1, c, 1, 1])
}

/// Max pooling; gradient flows to the first maximum in row-major order.
pub fn max_pool2d(g: &mut Graph, input: Var, window: usize, stride: usize) -> Result<Var> {
    let (idx, shape) = kernels::max_pool_argmax(g.value(input).data(), g.shape(input), window, stride)?;
    g.gather(input, Arc::new(idx), &shape)
}

/// Affine map `input · weight + bias` with `input: batch × d_in`,
/// `weight: d_in × d_out`, `bias: d_out`.
pub fn linear(g: &mut Graph, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let (si, sw) = (g.shape(input).to_vec(), g.shape(weight).to_vec());
    if si.len() != 2 || sw.len() != 2 || si[1] != sw[0] {
        return Err(Error::shape("linear", &si, &sw));
    }
    if g.shape(bias) != [sw[1]] {
        return Err(Error::shape("linear", g.shape(bias), &[sw[1]]));
    }
    let y = g.matmul(input, weight)?;
    let b = g.reshape(bias, &[1, sw[1]])?;
    g.add_b(y, b)
}

fn row_max(g: &Graph, x: Var) -> crate::tensor::Tensor {
    let t = g.value(x);
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let data = (0..n)
        .map(|r| t.data()[r * d..(r + 1) * d].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    crate::tensor::Tensor::new(vec![n, 1], data).expect("row max shape")
}

fn shifted_rows(g: &mut Graph, x: Var, op: &'static str) -> Result<Var> {
    if g.shape(x).len() != 2 {
        return Err(Error::invalid(op, format!("expected 2-D input, got {:?}", g.shape(x))));
    }
    // The shift cancels analytically, so it is held constant.
    let m = row_max(g, x);
    let m = g.constant(m)?;
    g.sub_b(x, m)
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let shifted = shifted_rows(g, x, "softmax")?;
    let e = g.exp(shifted)?;
    let n = g.shape(x)[0];
    let z = g.sum_to(e, &[n, 1])?;
    g.div_b(e, z)
}

/// Row-wise log-softmax of a 2-D tensor.
pub fn log_softmax_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let shifted = shifted_rows(g, x, "log_softmax")?;
    let e = g.exp(shifted)?;
    let n = g.shape(x)[0];
    let z = g.sum_to(e, &[n, 1])?;
    let lz = g.log(z)?;
    g.sub_b(shifted, lz)
}

/// `softmax(Q·Kᵀ/√d)·V` with `Q: n_q×d`, `K: n_k×d`, `V: n_k×d_v`.
pub fn scaled_dot_product_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::shape("attention", &sq, &sk));
    }
    if sv.len() != 2 || sv[0] != sk[0] {
        return Err(Error::shape("attention", &sk, &sv));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (sq[1] as f64).sqrt())?;
    let weights = softmax_rows(g, scores)?;
    g.matmul(weights, v)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::invalid(
            "cross_entropy",
            format!("logits {s:?} do not match {} labels", labels.len()),
        ));
    }
    let classes = s[1];
    let mut idx = Vec::with_capacity(labels.len());
    for (row, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid("cross_entropy", format!("label {l} outside [0, {classes})")));
        }
        idx.push(row * classes + l);
    }
    let logp = log_softmax_rows(g, logits)?;
    let picked = g.gather(logp, Arc::new(idx), &[labels.len()])?;
    let m = g.mean(picked)?;
    g.neg(m)
}

/// Mean squared error over all elements.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape("mse", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Scales channel `c` of `activations` (`N×C×…`) by `multiplier[c]`.
pub fn channel_modulate(g: &mut Graph, activations: Var, multiplier: Var) -> Result<Var> {
    let s = g.shape(activations).to_vec();
    if s.len() < 2 {
        return Err(Error::invalid("channel_modulate", format!("activations {s:?} have no channel axis")));
    }
    if g.shape(multiplier) != [s[1]] {
        return Err(Error::shape("channel_modulate", g.shape(multiplier), &[s[1]]));
    }
    let mut bshape = vec![1; s.len()];
    bshape[1] = s[1];
    let m = g.reshape(multiplier, &bshape)?;
    g.mul_b(activations, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_slice(shape, v).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rand::rng())).unwrap();
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = conv2d(&mut g, x, &Conv2dSpec::new(1, 1, 1, 1, 0), w, Some(b)).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn conv_all_ones_3x3_padded() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let y = conv2d(&mut g, x, &Conv2dSpec::new(1, 1, 3, 1, 1), w, None).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[4], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[2], 4.0);
        assert_eq!(d[6], 4.0);
        assert_eq!(d[8], 4.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn conv_backbone_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 84, 84])).unwrap();
        let w = g.constant(Tensor::zeros(&[32, 3, 3, 3])).unwrap();
        let y = conv2d(&mut g, x, &Conv2dSpec::new(3, 32, 3, 1, 1), w, None).unwrap();
        assert_eq!(g.shape(y), &[1, 32, 84, 84]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        assert!(conv2d(&mut g, x, &Conv2dSpec::new(3, 1, 3, 1, 0), w, None).is_err());
        let w2 = g.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        assert!(conv2d(&mut g, x, &Conv2dSpec::new(2, 1, 3, 1, 0), w2, None).is_err());
    }

    #[test]
    fn conv_transpose_identity_and_doubling() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rand::rng())).unwrap();
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let y = conv_transpose2d(&mut g, x, &Conv2dSpec::new(1, 1, 1, 1, 0), w, None).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));

        let x = g.constant(Tensor::ones(&[1, 4, 5, 5])).unwrap();
        let w = g.constant(Tensor::ones(&[4, 2, 2, 2])).unwrap();
        let y = conv_transpose2d(&mut g, x, &Conv2dSpec::new(4, 2, 2, 2, 0), w, None).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 10, 10]);
    }

    #[test]
    fn batch_norm_fixed_point_constant_and_zero_scale() {
        let mut g = Graph::new();
        // Two samples per channel position: ±1 is zero-mean, unit-variance.
        let x = g.constant(t(&[2, 1, 1, 2], &[1.0, -1.0, -1.0, 1.0])).unwrap();
        let one = g.constant(Tensor::ones(&[1])).unwrap();
        let zero = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = batch_norm(&mut g, x, one, zero, 1e-5).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)).unwrap() < 1e-4);

        let c = g.constant(Tensor::full(&[3, 1, 2, 2], 4.2)).unwrap();
        let y = batch_norm(&mut g, c, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let r = g.constant(Tensor::uniform(&[3, 2, 2, 2], -3.0, 3.0, &mut rand::rng())).unwrap();
        let gz = g.constant(Tensor::zeros(&[2])).unwrap();
        let beta = g.constant(Tensor::vector(vec![0.5, -2.0])).unwrap();
        let y = batch_norm(&mut g, r, gz, beta, 1e-5).unwrap();
        let d = g.value(y).data();
        for n in 0..3 {
            for c in 0..2 {
                for k in 0..4 {
                    assert_eq!(d[(n * 2 + c) * 4 + k], [0.5, -2.0][c]);
                }
            }
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 2, 2])).unwrap();
        let one = g.constant(Tensor::ones(&[1])).unwrap();
        let zero = g.constant(Tensor::zeros(&[1])).unwrap();
        assert!(batch_norm(&mut g, x, one, zero, 1e-5).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        let y = max_pool2d(&mut g, x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let c = g.param(Tensor::full(&[1, 1, 2, 2], 7.0)).unwrap();
        let y = max_pool2d(&mut g, c, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(c).data(), &[1.0, 0.0, 0.0, 0.0]);

        let big = g.constant(Tensor::zeros(&[1, 1, 1, 1])).unwrap();
        assert!(max_pool2d(&mut g, big, 2, 2).is_err());
    }

    #[test]
    fn max_pool_backbone_extents() {
        let mut g = Graph::new();
        let mut x = g.constant(Tensor::zeros(&[1, 1, 84, 84])).unwrap();
        let mut sizes = vec![];
        for _ in 0..4 {
            x = max_pool2d(&mut g, x, 2, 2).unwrap();
            sizes.push(g.shape(x)[2]);
        }
        assert_eq!(sizes, vec![42, 21, 10, 5]);
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0]);

        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = linear(&mut g, x, eye, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let zw = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let bias = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let y = linear(&mut g, x, zw, bias).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        assert!(linear(&mut g, x, bias, b).is_err());
    }

    #[test]
    fn attention_examples() {
        let mut g = Graph::new();
        let q = g.constant(t(&[2, 2], &[0.3, -1.0, 2.0, 0.5])).unwrap();
        let k1 = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let v1 = g.constant(t(&[1, 3], &[4.0, 5.0, 6.0])).unwrap();
        let y = scaled_dot_product_attention(&mut g, q, k1, v1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);

        let k2 = g.constant(t(&[2, 2], &[1.0, 2.0, 1.0, 2.0])).unwrap();
        let v2 = g.constant(t(&[2, 1], &[1.0, 3.0])).unwrap();
        let y = scaled_dot_product_attention(&mut g, q, k2, v2).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 2.0).abs() < 1e-12));

        let qo = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let k3 = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 1.0])).unwrap();
        let v3 = g.constant(t(&[3, 1], &[1.0, 2.0, 6.0])).unwrap();
        let y = scaled_dot_product_attention(&mut g, qo, k3, v3).unwrap();
        assert!((g.value(y).data()[0] - 3.0).abs() < 1e-12);

        let bad = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(scaled_dot_product_attention(&mut g, q, bad, v1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[4, 7], -30.0, 30.0, &mut rand::rng())).unwrap();
        let s = softmax_rows(&mut g, x).unwrap();
        for r in g.value(s).data().chunks(7) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::zeros(&[3, 5])).unwrap();
        let l = cross_entropy(&mut g, u, &[0, 3, 4]).unwrap();
        assert!((g.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);

        let x = g.constant(t(&[1, 2], &[10.0, 0.0])).unwrap();
        let l = cross_entropy(&mut g, x, &[0]).unwrap();
        let expected = (1.0 + (-10f64).exp()).ln();
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-15);
        assert!((expected - 4.5398e-5).abs() < 1e-8);

        let big = g.constant(t(&[1, 3], &[1e6, 0.0, 0.0])).unwrap();
        let l = cross_entropy(&mut g, big, &[0]).unwrap();
        assert!(g.value(l).item().unwrap().abs() < 1e-12);

        assert!(cross_entropy(&mut g, big, &[3]).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let l = mse(&mut g, p, p).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        let l = mse(&mut g, p, z).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 1.0);
        let two = g.constant(Tensor::vector(vec![2.0])).unwrap();
        let zero = g.constant(Tensor::vector(vec![0.0])).unwrap();
        let l = mse(&mut g, two, zero).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 4.0);
        assert!(mse(&mut g, p, two).is_err());
    }

    #[test]
    fn channel_modulate_examples() {
        let mut g = Graph::new();
        let o = g.constant(Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rand::rng())).unwrap();
        let ones = g.constant(Tensor::ones(&[3])).unwrap();
        let y = channel_modulate(&mut g, o, ones).unwrap();
        assert!(g.value(y).bit_eq(g.value(o)));

        let zeros = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = channel_modulate(&mut g, o, zeros).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let one_ch = g.constant(Tensor::ones(&[1, 1, 2, 2])).unwrap();
        let half = g.constant(Tensor::vector(vec![0.5])).unwrap();
        let y = channel_modulate(&mut g, one_ch, half).unwrap();
        assert_eq!(g.value(y).data(), &[0.5; 4]);

        assert!(channel_modulate(&mut g, o, half).is_err());
    }
}
