//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node, so node order is a topological order and backward simply walks the
//! tape in reverse. Vector-Jacobian products are themselves expressed as
//! graph operations: with `create_graph = true` the backward pass is recorded
//! and can be differentiated again, which is what exact meta-gradients
//! through an inner adaptation loop need.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Powf(Var, f64),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { x: Var, idx: Arc<Vec<usize>> },
    Scatter { x: Var, idx: Arc<Vec<usize>> },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvWeightGrad { x: Var, gy: Var, stride: usize, pad: usize },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Offset(a) | Exp(a) | Log(a) | Tanh(a) | Sigmoid(a)
            | Softplus(a) | Powf(a, _) | Relu(a) | Transpose(a) | Reshape(a) | BroadcastTo(a)
            | SumTo(a) => vec![*a],
            Narrow { x, .. } | Pad { x, .. } | Gather { x, .. } | Scatter { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
            Conv2d { x, w, .. } | ConvTranspose2d { x, w, .. } => vec![*x, *w],
            ConvWeightGrad { x, gy, .. } => vec![*x, *gy],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every trainable leaf.
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; nodes outside the differentiated graph get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(&v.0) {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes.get(v.0).map(Vec::as_slice).unwrap_or(&[])),
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.recording
            && op
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Runs `f` without recording; every node it creates is a constant.
    pub fn no_grad<T>(&mut self, f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
        let saved = self.recording;
        self.recording = false;
        let out = f(self);
        self.recording = saved;
        out
    }

    // ---- elementwise -------------------------------------------------------

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).zip_map(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b), "div")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a), "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a), "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), "log")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), "softplus")
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p), "powf")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), "relu")
    }

    // ---- broadcasting helpers ----------------------------------------------

    fn broadcast_pair(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Var, Var)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return Ok((a, b));
        }
        let target = kernels::broadcast_shape(&sa, &sb, name)?;
        let a = if sa == target { a } else { self.broadcast_to(a, &target)? };
        let b = if sb == target { b } else { self.broadcast_to(b, &target)? };
        Ok((a, b))
    }

    pub fn add_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "add")?;
        self.add(a, b)
    }

    pub fn sub_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "sub")?;
        self.sub(a, b)
    }

    pub fn mul_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "mul")?;
        self.mul(a, b)
    }

    pub fn div_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "div")?;
        self.div(a, b)
    }

    // ---- shape ops ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let data = kernels::broadcast_to(src.data(), src.shape(), shape)?;
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::BroadcastTo(a), "broadcast_to")
    }

    /// Sums down to a broadcast-compatible shape (keeps unit axes).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let data = kernels::sum_to(src.data(), src.shape(), shape)?;
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::SumTo(a), "sum_to")
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.sum_to(a, &[])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::invalid("transpose", format!("expected 2-D, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = kernels::transpose(t.data(), r, c);
        self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), "transpose")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), "matmul")
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, data), Op::Narrow { x: a, axis, start }, "narrow")
    }

    /// Zero-pads `axis` to `total` entries, placing `a` at `start`.
    pub fn pad(&mut self, a: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || start + t.shape()[axis] > total {
            return Err(Error::invalid("pad", format!("cannot place {:?} at {start} in {total}", t.shape())));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            data[dst..dst + n * inner].copy_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, data), Op::Pad { x: a, axis, start }, "pad")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base_shape:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base_shape.len();
            if !same_rank || s.iter().zip(&base_shape).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::shape("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// `out[k] = a.flat[idx[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::invalid("gather", format!("{} indices for shape {shape:?}", idx.len())));
        }
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            data.push(*t.data().get(i).ok_or_else(|| Error::invalid("gather", format!("index {i} out of range")))?);
        }
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { x: a, idx }, "gather")
    }

    /// Adjoint of [`Graph::gather`]: `out.flat[idx[k]] += a[k]`.
    pub fn scatter(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.len() != idx.len() {
            return Err(Error::invalid("scatter", format!("{} values for {} indices", t.len(), idx.len())));
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(t.data()) {
            if i >= n {
                return Err(Error::invalid("scatter", format!("index {i} out of range")));
            }
            data[i] += v;
        }
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Scatter { x: a, idx }, "scatter")
    }

    // ---- convolution ----------------------------------------------------------

    /// Cross-correlation of NCHW `x` with `w: Co×Ci×kh×kw` (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::forward(self.shape(x), self.shape(w), stride, pad, "conv2d")?;
        let data = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom);
        self.push(
            Tensor::from_parts(geom.out_shape(), data),
            Op::Conv2d { x, w, stride, pad },
            "conv2d",
        )
    }

    /// Transposed convolution: the input-adjoint of [`Graph::conv2d`] with the
    /// same `w`, producing an output of spatial extent `out_hw`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let geom = ConvGeom::adjoint(self.shape(x), self.shape(w), stride, pad, out_hw, "conv_transpose2d")?;
        let data = kernels::conv2d_input_adjoint(self.value(x).data(), self.value(w).data(), &geom);
        self.push(
            Tensor::from_parts(geom.in_shape(), data),
            Op::ConvTranspose2d { x, w, stride, pad },
            "conv_transpose2d",
        )
    }

    /// Weight-adjoint of [`Graph::conv2d`]: gradient of `⟨conv2d(x, w), gy⟩` in `w`.
    pub fn conv_weight_grad(
        &mut self,
        x: Var,
        gy: Var,
        stride: usize,
        pad: usize,
        kernel: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gy).to_vec();
        if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] {
            return Err(Error::shape("conv_weight_grad", &xs, &gs));
        }
        let w_shape = [gs[1], xs[1], kernel.0, kernel.1];
        let geom = ConvGeom::forward(&xs, &w_shape, stride, pad, "conv_weight_grad")?;
        if geom.ho != gs[2] || geom.wo != gs[3] {
            return Err(Error::shape("conv_weight_grad", &xs, &gs));
        }
        let data = kernels::conv2d_weight_adjoint(self.value(x).data(), self.value(gy).data(), &geom);
        self.push(
            Tensor::from_parts(geom.weight_shape(), data),
            Op::ConvWeightGrad { x, gy, stride, pad },
            "conv_weight_grad",
        )
    }

    // ---- backward -------------------------------------------------------------

    /// Gradients of scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the backward computation is itself recorded, so the
    /// returned vars can be differentiated again. Entries of `wrt` that do not
    /// influence `output` get zero constants.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let out_shape = self.shape(output).to_vec();
        if self.value(output).len() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let last = output.0;
        let mut needed = vec![false; last + 1];
        for w in wrt {
            if w.0 <= last && self.nodes[w.0].requires_grad {
                needed[w.0] = true;
            }
        }
        for i in 0..=last {
            if !needed[i] && self.nodes[i].requires_grad {
                needed[i] = self.nodes[i].op.parents().iter().any(|p| needed[p.0]);
            }
        }

        let saved = self.recording;
        self.recording = create_graph;
        let result = self.run_backward(output, &out_shape, &needed);
        self.recording = saved;
        let grads = result?;

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            match grads.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    out.push(self.constant(z)?);
                }
            }
        }
        Ok(out)
    }

    fn run_backward(&mut self, output: Var, out_shape: &[usize], needed: &[bool]) -> Result<Vec<Option<Var>>> {
        let last = output.0;
        let mut grads: Vec<Option<Var>> = vec![None; last + 1];
        if !needed[last] {
            return Ok(grads);
        }
        grads[last] = Some(self.constant(Tensor::ones(out_shape))?);
        for i in (0..=last).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let contributions = self.vjp(&op, Var(i), g, needed)?;
            for (p, gp) in contributions {
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, gp)?,
                    None => gp,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of one node, for parents that are needed.
    fn vjp(&mut self, op: &Op, out: Var, g: Var, needed: &[bool]) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        let need = |v: &Var| needed[v.0];
        let mut res = Vec::with_capacity(2);
        match *op {
            Leaf => {}
            Add(a, b) => {
                if need(&a) {
                    res.push((a, g));
                }
                if need(&b) {
                    res.push((b, g));
                }
            }
            Sub(a, b) => {
                if need(&a) {
                    res.push((a, g));
                }
                if need(&b) {
                    res.push((b, self.neg(g)?));
                }
            }
            Mul(a, b) => {
                if need(&a) {
                    res.push((a, self.mul(g, b)?));
                }
                if need(&b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Div(a, b) => {
                if need(&a) {
                    res.push((a, self.div(g, b)?));
                }
                if need(&b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = self.div(out, b)?;
                    let t = self.mul(g, q)?;
                    res.push((b, self.neg(t)?));
                }
            }
            Neg(a) => res.push((a, self.neg(g)?)),
            Scale(a, c) => res.push((a, self.scale(g, c)?)),
            Offset(a) => res.push((a, g)),
            Exp(a) => res.push((a, self.mul(g, out)?)),
            Log(a) => res.push((a, self.div(g, a)?)),
            Tanh(a) => {
                let sq = self.mul(out, out)?;
                let n = self.neg(sq)?;
                let d = self.add_scalar(n, 1.0)?;
                res.push((a, self.mul(g, d)?));
            }
            Sigmoid(a) => {
                let n = self.neg(out)?;
                let one_minus = self.add_scalar(n, 1.0)?;
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, d)?));
            }
            Softplus(a) => {
                let s = self.sigmoid(a)?;
                res.push((a, self.mul(g, s)?));
            }
            Powf(a, p) => {
                let d = self.powf(a, p - 1.0)?;
                let d = self.scale(d, p)?;
                res.push((a, self.mul(g, d)?));
            }
            Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask)?;
                res.push((a, self.mul(g, mask)?));
            }
            MatMul(a, b) => {
                if need(&a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if need(&b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Transpose(a) => res.push((a, self.transpose(g)?)),
            Reshape(a) => {
                let s = self.shape(a).to_vec();
                res.push((a, self.reshape(g, &s)?));
            }
            BroadcastTo(a) => {
                let s = self.shape(a).to_vec();
                res.push((a, self.sum_to(g, &s)?));
            }
            SumTo(a) => {
                let s = self.shape(a).to_vec();
                res.push((a, self.broadcast_to(g, &s)?));
            }
            Narrow { x, axis, start } => {
                let total = self.shape(x)[axis];
                res.push((x, self.pad(g, axis, start, total)?));
            }
            Pad { x, axis, start } => {
                let len = self.shape(x)[axis];
                res.push((x, self.narrow(g, axis, start, len)?));
            }
            Concat { ref parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if need(&p) {
                        res.push((p, self.narrow(g, axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Gather { x, ref idx } => {
                let s = self.shape(x).to_vec();
                res.push((x, self.scatter(g, Arc::clone(idx), &s)?));
            }
            Scatter { x, ref idx } => {
                let s = self.shape(x).to_vec();
                res.push((x, self.gather(g, Arc::clone(idx), &s)?));
            }
            Conv2d { x, w, stride, pad } => {
                if need(&x) {
                    let s = self.shape(x).to_vec();
                    res.push((x, self.conv_transpose2d(g, w, stride, pad, (s[2], s[3]))?));
                }
                if need(&w) {
                    let s = self.shape(w).to_vec();
                    res.push((w, self.conv_weight_grad(x, g, stride, pad, (s[2], s[3]))?));
                }
            }
            ConvTranspose2d { x, w, stride, pad } => {
                if need(&x) {
                    res.push((x, self.conv2d(g, w, stride, pad)?));
                }
                if need(&w) {
                    let s = self.shape(w).to_vec();
                    res.push((w, self.conv_weight_grad(g, x, stride, pad, (s[2], s[3]))?));
                }
            }
            ConvWeightGrad { x, gy, stride, pad } => {
                if need(&x) {
                    let s = self.shape(x).to_vec();
                    res.push((x, self.conv_transpose2d(gy, g, stride, pad, (s[2], s[3]))?));
                }
                if need(&gy) {
                    res.push((gy, self.conv2d(x, g, stride, pad)?));
                }
            }
        }
        Ok(res)
    }

    /// Gradients of scalar `output` with respect to every trainable leaf.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        let leaves: Vec<Var> = (0..=output.0)
            .filter(|&i| self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf))
            .map(Var)
            .collect();
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let gvars = self.grad(output, &leaves, false)?;
        let grads = leaves
            .iter()
            .zip(gvars)
            .map(|(l, g)| (l.0, self.value(g).clone()))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Evaluates `build` on fresh trainable leaves holding `inputs`.
///
/// Intermediates stay on the returned graph for a later backward pass.
pub fn forward_eval<F>(inputs: &[Tensor], build: F) -> Result<(Graph, Vec<Var>, Vec<Var>)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Vec<Var>>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let outs = build(&mut g, &vars)?;
    Ok((g, vars, outs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_slice(shape, v).unwrap()
    }

    #[test]
    fn forward_identity_square_and_sum() {
        let x = t(&[2], &[2.0, 3.0]);
        let (g, _, out) = forward_eval(&[x.clone()], |_, v| Ok(vec![v[0]])).unwrap();
        assert_eq!(g.value(out[0]).data(), &[2.0, 3.0]);

        let (g, _, out) = forward_eval(&[x], |g, v| Ok(vec![g.mul(v[0], v[0])?])).unwrap();
        assert_eq!(g.value(out[0]).data(), &[4.0, 9.0]);

        let (g, _, out) = forward_eval(&[t(&[3], &[1., 2., 3.])], |g, v| Ok(vec![g.sum(v[0])?])).unwrap();
        assert_eq!(g.value(out[0]).item().unwrap(), 6.0);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let err = forward_eval(&[t(&[2], &[1., 2.]), t(&[3], &[1., 2., 3.])], |g, v| {
            Ok(vec![g.add(v[0], v[1])?])
        })
        .err()
        .unwrap();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let err = forward_eval(&[t(&[1], &[0.0])], |g, v| Ok(vec![g.log(v[0])?]))
            .err()
            .unwrap();
        assert!(err.is_non_finite());
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item().unwrap(), 6.0);
    }

    #[test]
    fn backward_sum_is_ones_and_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1., -2., 3., 4.])).unwrap();
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[1.0; 4]);

        let c = g.scalar(5.0).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1., 2.])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn detached_node_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let d = g.detach(x).unwrap();
        let y = g.mul(d, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item().unwrap(), 2.0);
        assert_eq!(grads.get(d).item().unwrap(), 0.0);
    }

    #[test]
    fn multiple_consumers_accumulate() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let a = g.scale(x, 2.0).unwrap();
        let b = g.mul(x, x).unwrap();
        let y = g.add(a, b).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).item().unwrap(), 8.0);
    }

    #[test]
    fn second_order_through_create_graph() {
        // y = x^3, dy/dx = 3x^2, d2y/dx2 = 6x
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let x2 = g.mul(x, x).unwrap();
        let y = g.mul(x2, x).unwrap();
        let dy = g.grad(y, &[x], true).unwrap()[0];
        assert_eq!(g.value(dy).item().unwrap(), 12.0);
        let d2 = g.grad(dy, &[x], false).unwrap()[0];
        assert_eq!(g.value(d2).item().unwrap(), 12.0);
    }

    #[test]
    fn no_grad_records_constants() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let y = g.no_grad(|g| g.mul(x, x)).unwrap();
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn narrow_pad_concat_shapes() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = g.param(t(&[2, 1], &[5., 6.])).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let n = g.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(n).data(), &[2., 5., 4., 6.]);
        let p = g.pad(b, 1, 1, 3).unwrap();
        assert_eq!(g.value(p).data(), &[0., 5., 0., 0., 6., 0.]);
    }
}
