//! Reverse-mode gradient tape over a fixed primitive set.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! node list in reverse, which is exactly reverse execution order.

use std::sync::Arc;

use super::kernels::{self, ConvGeom, NormStats};
use super::params::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    BiasAdd { x: Var, b: Var },
    AddPlanes { x: Var, e: Var },
    Silu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: NormStats<S> },
    Softmax(Var),
    Upsample { x: Var, factor: usize },
    Concat(Vec<Var>),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Gather { table: Var, ids: Vec<usize> },
    MeanPlanes(Var),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Tape-backed view of a [`ParamStore`]: one leaf per stored tensor.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    })
}

fn silu<S: Scalar>(v: S) -> S {
    v / (S::one() + (-v).exp())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it ever requires a gradient.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. `requires_grad` is ignored on inference tapes.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Binds every tensor of `store` as a leaf; trainable ones require grad.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store
            .entries()
            .iter()
            .map(|e| self.leaf(e.value.cast(), e.trainable))
            .collect();
        Bound { vars }
    }

    /// Same as [`bind`](Self::bind) but takes the tensors from an already
    /// converted copy of the store (used by the 64-bit shadow evaluation).
    pub fn bind_values(&mut self, store: &ParamStore, values: &[Tensor<S>]) -> Bound {
        let vars = store
            .entries()
            .iter()
            .zip(values)
            .map(|(e, v)| self.leaf(v.clone(), e.trainable))
            .collect();
        Bound { vars }
    }

    /// `[M,K] x [K,N]`, or batched `[B,M,K] x [B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return mismatch("matmul", &sa, &sb),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            S::gemm(
                false,
                false,
                m,
                n,
                k,
                S::one(),
                &av[i * m * k..][..m * k],
                &bv[i * k * n..][..k * n],
                S::zero(),
                &mut out[i * m * n..][..m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `x: [B,C,H,W]`, `w: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([b, c, h, wd], [o, c2, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return mismatch("conv2d", &sx, &sw);
        };
        if c != c2 || stride == 0 || h + 2 * pad < *kh || wd + 2 * pad < *kw {
            return mismatch("conv2d", &sx, &sw);
        }
        let geom = ConvGeom {
            batch: *b,
            in_ch: *c,
            h: *h,
            w: *wd,
            out_ch: *o,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
        };
        let y = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let shape = vec![*b, *o, geom.out_h(), geom.out_w()];
        self.push(Tensor::from_parts(shape, y), Op::Conv2d { x, w, geom }, &[x, w], "conv2d")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return mismatch(name, va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    /// Adds `b: [C]` along axis 1 of `x: [B, C, ...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || sb != [sx[1]] {
            return mismatch("bias_add", &sx, &sb);
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / inner) % c])
            .collect();
        self.push(Tensor::from_parts(sx, data), Op::BiasAdd { x, b }, &[x, b], "bias_add")
    }

    /// Adds `e: [B, C]` to every spatial position of `x: [B, C, H, W]`.
    pub fn add_planes(&mut self, x: Var, e: Var) -> Result<Var> {
        let (sx, se) = (self.shape(x).to_vec(), self.shape(e).to_vec());
        if sx.len() != 4 || se != sx[..2] {
            return mismatch("add_planes", &sx, &se);
        }
        let plane = sx[2] * sx[3];
        let ev = self.value(e).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + ev[i / plane])
            .collect();
        self.push(Tensor::from_parts(sx, data), Op::AddPlanes { x, e }, &[x, e], "add_planes")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(silu);
        self.push(v, Op::Silu(x), &[x], "silu")
    }

    /// Group normalisation of `x: [B, C, ...]` with `groups` groups over the
    /// channel axis. A single group normalises each sample over all features.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || groups == 0 || sx[1] % groups != 0 {
            return mismatch("group_norm", &sx, &[groups]);
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return mismatch("group_norm", &sx, self.shape(gamma));
        }
        let r: usize = sx[2..].iter().product();
        let (y, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            sx[0],
            c,
            r,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            S::of(1e-5),
        );
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            stats,
        };
        self.push(Tensor::from_parts(sx, y), op, &[x, gamma, beta], "group_norm")
    }

    /// Softmax over the last axis. `mask` has shape `[G, M]`: the rows of `x`
    /// are split into `G` consecutive groups and `false` entries receive zero
    /// probability.
    pub fn softmax(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let m = *sx.last().unwrap();
        let rows = self.value(x).len() / m;
        if let Some(mk) = &mask {
            let g = mk.len() / m;
            if mk.len() % m != 0 || g == 0 || rows % g != 0 {
                return mismatch("softmax", &sx, &[mk.len()]);
            }
            if mk.chunks(m).any(|row| !row.iter().any(|&k| k)) {
                return invalid("softmax mask leaves a row with no visible key");
            }
        }
        let y = kernels::softmax_forward(self.value(x).data(), m, mask.as_deref().map(|v| v.as_slice()));
        self.push(Tensor::from_parts(sx, y), Op::Softmax(x), &[x], "softmax")
    }

    /// Nearest-neighbour resize of `[B, C, H, W]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || factor == 0 {
            return mismatch("upsample", &sx, &[factor]);
        }
        let y = kernels::upsample_nearest(self.value(x).data(), sx[0] * sx[1], sx[2], sx[3], factor);
        let shape = vec![sx[0], sx[1], sx[2] * factor, sx[3] * factor];
        self.push(Tensor::from_parts(shape, y), Op::Upsample { x, factor }, &[x], "upsample")
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat of zero tensors");
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return mismatch("concat", &s0, &[]);
        }
        let inner: usize = s0[2..].iter().product();
        let mut total_c = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len() || sp[0] != s0[0] || sp[2..] != s0[2..] {
                return mismatch("concat", &s0, sp);
            }
            total_c += sp[1];
        }
        let b = s0[0];
        let mut data = Vec::with_capacity(b * total_c * inner);
        for bi in 0..b {
            for &p in parts {
                let v = self.value(p);
                let ci = v.shape()[1];
                data.extend_from_slice(&v.data()[bi * ci * inner..][..ci * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total_c;
        self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts, "concat")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x], "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return mismatch("permute", &sx, perm);
        }
        let data = kernels::permute(self.value(x).data(), &sx, perm);
        let shape = perm.iter().map(|&p| sx[p]).collect();
        let op = Op::Permute {
            x,
            perm: perm.to_vec(),
        };
        self.push(Tensor::from_parts(shape, data), op, &[x], "permute")
    }

    /// Rows of `table: [V, D]` selected by `ids`, giving `[len, D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.is_empty() {
            return mismatch("gather", &st, &[ids.len()]);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return invalid(format!("gather: id {bad} outside table of {} rows", st[0]));
        }
        let d = st[1];
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push(Tensor::from_parts(vec![ids.len(), d], data), op, &[table], "gather")
    }

    /// Spatial mean `[B, C, H, W] -> [B, C]`.
    pub fn mean_planes(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return mismatch("mean_planes", &sx, &[]);
        }
        let plane = sx[2] * sx[3];
        let inv = S::one() / S::of(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<S>() * inv)
            .collect();
        self.push(Tensor::from_parts(sx[..2].to_vec(), data), Op::MeanPlanes(x), &[x], "mean_planes")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return mismatch("mse", va.shape(), vb.shape());
        }
        let n = S::of(va.len() as f64);
        let s: S = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b], "mse")
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return mismatch("cross_entropy", &sl, &[labels.len()]);
        }
        let k = sl[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return invalid(format!("cross_entropy: label {bad} outside {k} classes"));
        }
        let probs = kernels::softmax_forward(self.value(logits).data(), k, None);
        let n = S::of(labels.len() as f64);
        let loss: S = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * k + l].max(S::min_positive_value())).ln())
            .sum::<S>()
            / n;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, &[logits], "cross_entropy")
    }

    // Composite helpers.

    /// `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.bias_add(y, b)
    }

    pub fn conv2d_bias(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv2d(x, w, stride, pad)?;
        self.bias_add(y, b)
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.backward_from(loss, Tensor::scalar(S::one()).reshape(self.shape(loss))?)
    }

    /// Propagates an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_from(&self, root: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        seed.expect_shape("backward", self.shape(root))?;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed.to_vec());
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut acc = |v: Var, delta: Vec<S>| match &mut grads[v.0] {
            Some(cur) => {
                for (c, d) in cur.iter_mut().zip(delta) {
                    *c += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = va.shape();
                let (batch, m, k) = if sa.len() == 2 { (1, sa[0], sa[1]) } else { (sa[0], sa[1], sa[2]) };
                let n = *vb.shape().last().unwrap();
                if self.wants(*a) {
                    let mut da = vec![S::zero(); va.len()];
                    for i in 0..batch {
                        S::gemm(false, true, m, k, n, S::one(), &g[i * m * n..][..m * n], &vb.data()[i * k * n..][..k * n], S::zero(), &mut da[i * m * k..][..m * k]);
                    }
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); vb.len()];
                    for i in 0..batch {
                        S::gemm(true, false, k, n, m, S::one(), &va.data()[i * m * k..][..m * k], &g[i * m * n..][..m * n], S::zero(), &mut db[i * k * n..][..k * n]);
                    }
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&d| d * *c).collect()),
            Op::BiasAdd { x, b } => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*b) {
                    let sx = self.shape(*x);
                    let c = sx[1];
                    let inner: usize = sx[2..].iter().product();
                    let mut db = vec![S::zero(); c];
                    for (i, &d) in g.iter().enumerate() {
                        db[(i / inner) % c] += d;
                    }
                    acc(*b, db);
                }
            }
            Op::AddPlanes { x, e } => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*e) {
                    let sx = self.shape(*x);
                    let plane = sx[2] * sx[3];
                    acc(*e, g.chunks(plane).map(|c| c.iter().copied().sum()).collect());
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| {
                        let s = S::one() / (S::one() + (-v).exp());
                        d * s * (S::one() + v * (S::one() - s))
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let sx = self.shape(*x);
                let r: usize = sx[2..].iter().product();
                let (dx, dg, db) = kernels::group_norm_backward(
                    self.value(*x).data(),
                    g,
                    sx[0],
                    sx[1],
                    r,
                    *groups,
                    self.value(*gamma).data(),
                    stats,
                );
                if self.wants(*x) {
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, dg);
                }
                if self.wants(*beta) {
                    acc(*beta, db);
                }
            }
            Op::Softmax(x) => {
                let m = *node.value.shape().last().unwrap();
                acc(*x, kernels::softmax_backward(node.value.data(), g, m));
            }
            Op::Upsample { x, factor } => {
                let sx = self.shape(*x);
                acc(*x, kernels::upsample_nearest_backward(g, sx[0] * sx[1], sx[2], sx[3], *factor));
            }
            Op::Concat(parts) => {
                let s0 = node.value.shape();
                let (b, total_c) = (s0[0], s0[1]);
                let inner: usize = s0[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let ci = self.shape(p)[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(b * ci * inner);
                        for bi in 0..b {
                            dp.extend_from_slice(&g[(bi * total_c + offset) * inner..][..ci * inner]);
                        }
                        acc(p, dp);
                    }
                    offset += ci;
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_perm(perm);
                acc(*x, kernels::permute(g, node.value.shape(), &inv));
            }
            Op::Gather { table, ids } => {
                let st = self.shape(*table);
                let d = st[1];
                let mut dt = vec![S::zero(); st[0] * d];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[row * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::MeanPlanes(x) => {
                let sx = self.shape(*x);
                let plane = sx[2] * sx[3];
                let inv = S::one() / S::of(plane as f64);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &d in g {
                    dx.extend(std::iter::repeat(d * inv).take(plane));
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = S::of(2.0) * g[0] / S::of(va.len() as f64);
                if self.wants(*a) {
                    acc(*a, va.iter().zip(vb).map(|(&x, &y)| c * (x - y)).collect());
                }
                if self.wants(*b) {
                    acc(*b, va.iter().zip(vb).map(|(&x, &y)| c * (y - x)).collect());
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let c = g[0] / S::of(labels.len() as f64);
                let mut dl: Vec<S> = probs.iter().map(|&p| p * c).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * k + l] -= c;
                }
                acc(*logits, dl);
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient accumulated at `v`, if any path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every bound parameter, zeros where no path reached it.
    pub fn for_params(&self, tape: &Tape<S>, bound: &Bound) -> Vec<Tensor<S>> {
        bound
            .vars
            .iter()
            .map(|&v| {
                self.wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_no_gradient_path() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(w).is_none());
        let mut store = ParamStore::new();
        store.add("w", t(&[2], &[1.0, 2.0]), true);
        let mut tape = Tape::<f32>::new();
        let bound = tape.bind(&store);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap().for_params(&tape, &bound);
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut tape = Tape::<f32>::inference();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.constant(Tensor::from_fn(&[3, 3], |i| i as f32 * 0.5 - 1.0));
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, bad).unwrap_err().to_string();
        assert!(err.contains("[3, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[9.0; 4]);
        let z = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, z, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_output_rejected() {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant(t(&[1], &[f32::MAX]));
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn inference_tape_never_requires_grad() {
        let mut tape = Tape::<f32>::inference();
        let w = tape.leaf(t(&[1], &[1.0]), true);
        let y = tape.mul(w, w).unwrap();
        assert!(!tape.requires_grad(y));
    }
}
