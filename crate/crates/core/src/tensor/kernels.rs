//! Raw numeric kernels over contiguous row-major buffers.

use crate::error::{Error, Result};

/// `c = a · b` with `a: m×k`, `b: k×n`, optional transposes expressed as strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: buffers are sized by the callers for the given strides and
    // extents; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c);
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Per-destination-axis strides into a right-aligned broadcast source.
fn broadcast_strides(src: &[usize], dst: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(Error::shape(op, src, dst));
    }
    let lead = dst.len() - src.len();
    let mut src_strides = vec![0usize; src.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        src_strides[i] = acc;
        acc *= src[i];
    }
    let mut out = vec![0usize; dst.len()];
    for (i, &d) in dst.iter().enumerate() {
        if i < lead {
            continue;
        }
        let s = src[i - lead];
        if s == d {
            out[i] = src_strides[i - lead];
        } else if s == 1 {
            out[i] = 0;
        } else {
            return Err(Error::shape(op, src, dst));
        }
    }
    Ok(out)
}

/// Walks every element of `dst` shape in row-major order, calling
/// `f(dst_index, src_offset)`.
fn walk(dst: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = dst.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = dst[rank - 1];
    let istride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut pos = 0usize;
    loop {
        for k in 0..inner {
            f(pos + k, off + k * istride);
        }
        pos += inner;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < dst[d] {
                break;
            }
            off -= strides[d] * dst[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_to(x: &[f64], src: &[usize], dst: &[usize]) -> Result<Vec<f64>> {
    let strides = broadcast_strides(src, dst, "broadcast_to")?;
    let n: usize = dst.iter().product();
    let mut out = vec![0.0; n];
    walk(dst, &strides, |p, o| out[p] = x[o]);
    Ok(out)
}

/// Sums `x` (shape `src`) down to the broadcast-compatible shape `dst`.
pub fn sum_to(x: &[f64], src: &[usize], dst: &[usize]) -> Result<Vec<f64>> {
    let strides = broadcast_strides(dst, src, "sum_to")?;
    let n: usize = dst.iter().product();
    let mut out = vec![0.0; n];
    walk(src, &strides, |p, o| out[o] += x[p]);
    Ok(out)
}

/// Shape reached by broadcasting `a` against `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::shape(op, a, b));
        };
    }
    Ok(out)
}

/// Geometry of a 2-D cross-correlation `N×Ci×H×W ⋆ Co×Ci×kh×kw`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Geometry for a forward convolution; output extents use floor division.
    pub fn forward(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        op: &'static str,
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::shape(op, x_shape, w_shape));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::shape(op, x_shape, w_shape));
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        let (h, w, kh, kw) = (x_shape[2], x_shape[3], w_shape[2], w_shape[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(
                op,
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(ConvGeom {
            n: x_shape[0],
            ci: x_shape[1],
            h,
            w,
            co: w_shape[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry where the conv-space output is `gy` and the input extent is given.
    pub fn adjoint(
        gy_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        in_hw: (usize, usize),
        op: &'static str,
    ) -> Result<Self> {
        if gy_shape.len() != 4 || w_shape.len() != 4 || gy_shape[1] != w_shape[0] {
            return Err(Error::shape(op, gy_shape, w_shape));
        }
        let x_shape = [gy_shape[0], w_shape[1], in_hw.0, in_hw.1];
        let g = ConvGeom::forward(&x_shape, w_shape, stride, pad, op)?;
        if g.ho != gy_shape[2] || g.wo != gy_shape[3] {
            return Err(Error::invalid(
                op,
                format!(
                    "input extent {:?} does not map onto output {:?}",
                    in_hw,
                    &gy_shape[2..]
                ),
            ));
        }
        Ok(g)
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.n * self.ci * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.n * self.co * self.ho * self.wo
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.co, self.ho, self.wo]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.n, self.ci, self.h, self.w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.co, self.ci, self.kh, self.kw]
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.p();
        for c in 0..self.ci {
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (c * self.kh + a) * self.kw + b;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for i in 0..self.ho {
                        let y = (i * self.stride + a) as isize - self.pad as isize;
                        let out_row = &mut dst[i * self.wo..(i + 1) * self.wo];
                        if y < 0 || y >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + y as usize) * self.w..][..self.w];
                        for (j, o) in out_row.iter_mut().enumerate() {
                            let xx = (j * self.stride + b) as isize - self.pad as isize;
                            *o = if xx < 0 || xx >= self.w as isize {
                                0.0
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let p = self.p();
        for c in 0..self.ci {
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (c * self.kh + a) * self.kw + b;
                    let src = &col[row * p..(row + 1) * p];
                    for i in 0..self.ho {
                        let y = (i * self.stride + a) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + y as usize) * self.w..][..self.w];
                        for j in 0..self.wo {
                            let xx = (j * self.stride + b) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[xx as usize] += src[i * self.wo + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation without bias.
pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let mut col = vec![0.0; k * p];
    let mut out = vec![0.0; g.out_len()];
    let in_step = g.ci * g.h * g.w;
    let out_step = g.co * p;
    for n in 0..g.n {
        g.im2col(&x[n * in_step..(n + 1) * in_step], &mut col);
        gemm(g.co, k, p, w, (k, 1), &col, (p, 1), 0.0, &mut out[n * out_step..(n + 1) * out_step]);
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input (transposed convolution).
pub fn conv2d_input_adjoint(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let mut col = vec![0.0; k * p];
    let mut out = vec![0.0; g.in_len()];
    let in_step = g.ci * g.h * g.w;
    let out_step = g.co * p;
    for n in 0..g.n {
        gemm(k, g.co, p, w, (1, k), &gy[n * out_step..(n + 1) * out_step], (p, 1), 0.0, &mut col);
        g.col2im(&col, &mut out[n * in_step..(n + 1) * in_step]);
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its weights.
pub fn conv2d_weight_adjoint(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let mut col = vec![0.0; k * p];
    let mut out = vec![0.0; g.co * k];
    let in_step = g.ci * g.h * g.w;
    let out_step = g.co * p;
    for n in 0..g.n {
        g.im2col(&x[n * in_step..(n + 1) * in_step], &mut col);
        gemm(g.co, p, k, &gy[n * out_step..(n + 1) * out_step], (p, 1), &col, (1, p), 1.0, &mut out);
    }
    out
}

/// Flat input index of each pooling window's maximum; ties go to the first
/// element in row-major order.
pub fn max_pool_argmax(
    x: &[f64],
    shape: &[usize],
    window: usize,
    stride: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(Error::invalid("max_pool2d", format!("expected NCHW input, got {shape:?}")));
    }
    if window == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d", "window and stride must be positive"));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if window > h || window > w {
        return Err(Error::invalid(
            "max_pool2d",
            format!("window {window} larger than input {h}x{w}"),
        ));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + (i * stride) * w + j * stride;
                for a in 0..window {
                    for b in 0..window {
                        let p = base + (i * stride + a) * w + j * stride + b;
                        if x[p] > x[best] {
                            best = p;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![n, c, ho, wo]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint_shapes() {
        let x = [1.0, 2.0, 3.0];
        let b = broadcast_to(&x, &[1, 3], &[2, 3]).unwrap();
        assert_eq!(b, vec![1., 2., 3., 1., 2., 3.]);
        let s = sum_to(&b, &[2, 3], &[3]).unwrap();
        assert_eq!(s, vec![2., 4., 6.]);
        let all = sum_to(&b, &[2, 3], &[]).unwrap();
        assert_eq!(all, vec![12.0]);
        assert!(broadcast_to(&x, &[3], &[2, 2]).is_err());
    }

    #[test]
    fn broadcast_middle_axis() {
        let x = [10.0, 20.0];
        let b = broadcast_to(&x, &[1, 2, 1], &[2, 2, 3]).unwrap();
        assert_eq!(b, vec![10., 10., 10., 20., 20., 20., 10., 10., 10., 20., 20., 20.]);
        assert_eq!(sum_to(&b, &[2, 2, 3], &[1, 2, 1]).unwrap(), vec![60.0, 120.0]);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom::forward(&[2, 2, 5, 4], &[3, 2, 3, 2], 2, 1, "t").unwrap();
        let x: Vec<f64> = (0..g.in_len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 3 * 2).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let y = conv2d(&x, &w, &g);
        for n in 0..g.n {
            for o in 0..g.co {
                for i in 0..g.ho {
                    for j in 0..g.wo {
                        let mut s = 0.0;
                        for c in 0..g.ci {
                            for a in 0..g.kh {
                                for b in 0..g.kw {
                                    let yy = (i * 2 + a) as isize - 1;
                                    let xx = (j * 2 + b) as isize - 1;
                                    if yy >= 0 && yy < 5 && xx >= 0 && xx < 4 {
                                        s += x[((n * 2 + c) * 5 + yy as usize) * 4 + xx as usize]
                                            * w[((o * 2 + c) * 3 + a) * 2 + b];
                                    }
                                }
                            }
                        }
                        assert_eq!(y[((n * 3 + o) * g.ho + i) * g.wo + j], s);
                    }
                }
            }
        }
    }
}
