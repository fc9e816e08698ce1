use std::fmt::Debug;
use std::sync::Arc;

use super::conv::{self, Conv2dSpec};
use super::{check_finite, kernels, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` returns one optional gradient per input, each shaped like
/// the corresponding input.
pub trait CustomOp<T: Real>: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast {
        x: Var,
        y: Var,
        map: Arc<Vec<usize>>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather {
        src: Var,
        index: Arc<Vec<usize>>,
    },
    SliceLast {
        src: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    TokenMix {
        w: Var,
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv2dSpec,
    },
    MeanTokens(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it and a reverse sweep is a valid topological traversal.
#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    /// `x + y` where `y` is right-aligned against `x` and each of its
    /// extents either matches or is 1.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        let map = Arc::new(broadcast_map(&xs, &ys)?);
        let yv = self.value(y).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(map.iter())
            .map(|(&a, &j)| a + yv[j])
            .collect();
        let v = Tensor::from_parts(xs, data);
        self.push("add_broadcast", v, Op::AddBroadcast { x, y, map }, &[x, y])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// `out.flat[i] = src.flat[index[i]]`; indices may repeat.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(src).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::InvalidShape {
                op: "gather",
                shape: shape.to_vec(),
                reason: format!("{} indices supplied", index.len()),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::OutOfRange {
                what: "gather source",
                index: bad,
                len: n,
            });
        }
        let sd = self.value(src).data();
        let data: Vec<T> = index.iter().map(|&i| sd[i]).collect();
        let v = Tensor::new(shape, data)?;
        self.push("gather", v, Op::Gather { src, index }, &[src])
    }

    pub fn slice_last(&mut self, src: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.value(src);
        let d = s.last_dim();
        if width == 0 || start + width > d {
            return Err(Error::InvalidShape {
                op: "slice_last",
                shape: s.shape().to_vec(),
                reason: format!("range {start}..{} exceeds last axis", start + width),
            });
        }
        let rows = s.numel() / d;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&s.data()[r * d + start..r * d + start + width]);
        }
        let mut shape = s.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let v = Tensor::from_parts(shape, data);
        self.push("slice_last", v, Op::SliceLast { src, start }, &[src])
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Tensor::concat_last(&tensors)?;
        self.push("concat_last", v, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Applies an `[N, N]` matrix over the token axis of `[B, N, C]`.
    pub fn token_mix(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w);
        let xs = self.shape(x);
        let (b, n, c) = match (ws, xs) {
            ([n0, n1], [b, n, c]) if n0 == n1 && n1 == n => (*b, *n, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "token_mix",
                    lhs: ws.to_vec(),
                    rhs: xs.to_vec(),
                })
            }
        };
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * n * c];
        for (o, xb) in out.chunks_mut(n * c).zip(xd.chunks(n * c)) {
            kernels::matmul(wd, xb, o, n, n, c);
        }
        let v = Tensor::from_parts(vec![b, n, c], out);
        self.push("token_mix", v, Op::TokenMix { w, x }, &[w, x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (out, mean, rstd) = kernels::layer_norm(xv.data(), self.value(gain).data(), self.value(shift).data(), d);
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean,
                rstd,
            },
            &[x, gain, shift],
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).gelu();
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        self.push("softmax_rows", v, Op::SoftmaxRows(a), &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let geom = conv::geometry(&spec, self.shape(x))?;
        if self.shape(w) != spec.weight_shape() || self.shape(b) != [spec.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(w).to_vec(),
                rhs: spec.weight_shape().to_vec(),
            });
        }
        let out = conv::forward(
            &spec,
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let v = Tensor::from_parts(vec![geom.batch, geom.ho, geom.wo, spec.out_channels], out);
        self.push("conv2d", v, Op::Conv2d { x, w, b, spec }, &[x, w, b])
    }

    /// Mean over axis 1 of `[B, M, C]`.
    pub fn mean_tokens(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a);
        let (b, m, c) = match *s.shape() {
            [b, m, c] => (b, m, c),
            _ => {
                return Err(Error::InvalidShape {
                    op: "mean_tokens",
                    shape: s.shape().to_vec(),
                    reason: "expected [B, M, C]".into(),
                })
            }
        };
        let inv = T::one() / T::from_usize(m).unwrap();
        let mut out = vec![T::zero(); b * c];
        for (bi, o) in out.chunks_mut(c).enumerate() {
            for row in s.data()[bi * m * c..(bi + 1) * m * c].chunks(c) {
                for (ov, &v) in o.iter_mut().zip(row) {
                    *ov = *ov + v;
                }
            }
            for ov in o.iter_mut() {
                *ov = *ov * inv;
            }
        }
        let v = Tensor::from_parts(vec![b, c], out);
        self.push("mean_tokens", v, Op::MeanTokens(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::SumAll(a), &[a])
    }

    /// Mean softmax cross-entropy over a `[B, K]` batch of logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits);
        let (b, k) = s.dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::OutOfRange {
                what: "class label",
                index: bad,
                len: k,
            });
        }
        let mut probs = s.data().to_vec();
        kernels::softmax_rows(&mut probs, k);
        let tiny = T::min_positive_value();
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * k + l].max(tiny)).ln())
            .sum();
        let v = Tensor::scalar(total / T::from_usize(b).unwrap());
        self.push(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Records an externally defined op whose forward value is already computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let name = op.name();
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Clears leaf gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss; populates gradients on every leaf
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let ln = &self.nodes[loss.0];
        if !ln.value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                ln.value.shape()
            )));
        }
        if !ln.requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any leaf that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                self.nodes[id].grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        self.accumulate(grads, v, |dst| {
            for (d, &x) in dst.iter_mut().zip(g) {
                *d = *d + x;
            }
        });
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g);
                self.accumulate(grads, *b, |dst| {
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d = *d - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |dst| {
                    for ((d, &x), &y) in dst.iter_mut().zip(g).zip(bv) {
                        *d = *d + x * y;
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for ((d, &x), &y) in dst.iter_mut().zip(g).zip(av) {
                        *d = *d + x * y;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |dst| {
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d = *d + x * *s;
                    }
                });
            }
            Op::AddBroadcast { x, y, map } => {
                self.add_into(grads, *x, g);
                self.accumulate(grads, *y, |dst| {
                    for (&j, &x) in map.iter().zip(g) {
                        dst[j] = dst[j] + x;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |dst| kernels::matmul_a_bt(g, bv, dst, m, k, n));
                self.accumulate(grads, *b, |dst| kernels::matmul_at_b(av, g, dst, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, |dst| {
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] = dst[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.add_into(grads, *a, g),
            Op::Gather { src, index } => {
                self.accumulate(grads, *src, |dst| {
                    for (&i, &x) in index.iter().zip(g) {
                        dst[i] = dst[i] + x;
                    }
                });
            }
            Op::SliceLast { src, start } => {
                let d = self.value(*src).last_dim();
                let w = node.value.last_dim();
                self.accumulate(grads, *src, |dst| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for (d_, &x) in dst[r * d + start..r * d + start + w].iter_mut().zip(gr) {
                            *d_ = *d_ + x;
                        }
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.accumulate(grads, p, |dst| {
                        for (r, dr) in dst.chunks_mut(w).enumerate() {
                            for (d, &x) in dr.iter_mut().zip(&g[r * total + offset..r * total + offset + w]) {
                                *d = *d + x;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::TokenMix { w, x } => {
                let (b, n, c) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                self.accumulate(grads, *w, |dst| {
                    for bi in 0..b {
                        let sl = bi * n * c..(bi + 1) * n * c;
                        kernels::matmul_a_bt(&g[sl.clone()], &xv[sl], dst, n, n, c);
                    }
                });
                self.accumulate(grads, *x, |dst| {
                    for (bi, d) in dst.chunks_mut(n * c).enumerate() {
                        kernels::matmul_at_b(wv, &g[bi * n * c..(bi + 1) * n * c], d, n, n, c);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                let dn = T::from_usize(d).unwrap();
                let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
                self.accumulate(grads, *gain, |dst| {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for (j, &x) in gr.iter().enumerate() {
                            dst[j] = dst[j] + x * xhat(r, j);
                        }
                    }
                });
                self.accumulate(grads, *shift, |dst| {
                    for gr in g.chunks(d) {
                        for (dd, &x) in dst.iter_mut().zip(gr) {
                            *dd = *dd + x;
                        }
                    }
                });
                self.accumulate(grads, *x, |dst| {
                    for (r, gr) in g.chunks(d).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for (j, &x) in gr.iter().enumerate() {
                            let dxh = x * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat(r, j);
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for (j, &x) in gr.iter().enumerate() {
                            let dxh = x * gv[j];
                            dst[r * d + j] = dst[r * d + j] + rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |dst| {
                    for ((d, &x), &v) in dst.iter_mut().zip(g).zip(av) {
                        *d = *d + x * kernels::gelu_grad(v);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                self.accumulate(grads, *a, |dst| {
                    for ((dr, gr), yr) in dst.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &x), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + yv * (x - dot);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, spec } => {
                let geom = conv::geometry(spec, self.shape(*x)).expect("validated in forward");
                let (dx, dw, db) = conv::backward(spec, &geom, self.value(*x).data(), self.value(*w).data(), g);
                self.add_into(grads, *x, &dx);
                self.add_into(grads, *w, &dw);
                self.add_into(grads, *b, &db);
            }
            Op::MeanTokens(a) => {
                let s = self.shape(*a);
                let (m, c) = (s[1], s[2]);
                let inv = T::one() / T::from_usize(m).unwrap();
                self.accumulate(grads, *a, |dst| {
                    for (bi, db) in dst.chunks_mut(m * c).enumerate() {
                        let gb = &g[bi * c..(bi + 1) * c];
                        for row in db.chunks_mut(c) {
                            for (d, &x) in row.iter_mut().zip(gb) {
                                *d = *d + x * inv;
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                self.accumulate(grads, *a, |dst| {
                    for d in dst.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).last_dim();
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                self.accumulate(grads, *logits, |dst| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            dst[i * k + j] = dst[i * k + j] + (probs[i * k + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                for (v, gi) in inputs.iter().zip(op.backward(&ins, &node.value, &gt)) {
                    if let Some(gi) = gi {
                        self.add_into(grads, *v, gi.data());
                    }
                }
            }
        }
    }
}

/// For each flat index of `x_shape`, the flat index of the broadcast source.
fn broadcast_map(x_shape: &[usize], y_shape: &[usize]) -> Result<Vec<usize>> {
    let bad = || Error::ShapeMismatch {
        op: "add_broadcast",
        lhs: x_shape.to_vec(),
        rhs: y_shape.to_vec(),
    };
    if y_shape.len() > x_shape.len() {
        return Err(bad());
    }
    let offset = x_shape.len() - y_shape.len();
    let mut strides = vec![0usize; x_shape.len()];
    let mut acc = 1;
    for i in (0..y_shape.len()).rev() {
        let (xe, ye) = (x_shape[offset + i], y_shape[i]);
        if ye == xe {
            strides[offset + i] = acc;
        } else if ye != 1 {
            return Err(bad());
        }
        acc *= ye;
    }
    let numel: usize = x_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; x_shape.len()];
    for _ in 0..numel {
        map.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for ax in (0..x_shape.len()).rev() {
            counter[ax] += 1;
            if counter[ax] < x_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 7., -1.]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let y = tape.leaf(t(&[3], &[4., -5., 6.]), true);
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4., -5., 6.]);
        assert_eq!(tape.grad(y).unwrap().data(), &[1., 2., 3.]);
    }

    #[test]
    fn second_backward_is_an_error_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
        tape.reset_grads();
        tape.backward(s).unwrap();
    }

    #[test]
    fn non_scalar_and_detached_losses_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        assert!(tape.backward(x).is_err());
        let c = tape.constant(t(&[2], &[1., 2.]));
        let s = tape.sum(c).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn broadcast_map_handles_unit_extents() {
        let m = broadcast_map(&[2, 3, 2], &[3, 1]).unwrap();
        assert_eq!(m, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
        let m = broadcast_map(&[2, 2], &[2]).unwrap();
        assert_eq!(m, vec![0, 1, 0, 1]);
        assert!(broadcast_map(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3., -1.]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6., -2.]);
    }
}
