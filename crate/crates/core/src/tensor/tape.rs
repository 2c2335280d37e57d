use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        means: Vec<T>,
        inv_std: Vec<T>,
    },
    Silu(Var),
    LeakyRelu(Var, T),
    Upsample2x(Var),
    Concat(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<T>,
    },
    Embedding {
        table: Var,
        rows: Vec<usize>,
    },
    Mse(Var, Var),
    Sum(Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Weights of a multi-head self-attention layer: optional pre-normalization,
/// 1x1 projections for query, key, value and output.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub norm: Option<(Var, Var)>,
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub out: (Var, Var),
}

/// Records operations in execution order. Node indices are a topological
/// order, so the backward pass is a single reverse sweep.
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` yields no gradients.
    pub fn no_grad() -> Self {
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

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = self.needs(parents);
        let op = if rg { op } else { Op::Leaf };
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A borrowed leaf whose gradient is tracked.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// An owned leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.record(out, Op::Scale(a, s), &[a])
    }

    /// `x: [N,C,H,W] + v: [N,C]` broadcast over the spatial dims.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(v).shape() != [n, c] {
            return Err(Error::shape(
                "add_channel",
                format!("{:?} cannot broadcast onto {:?}", self.value(v).shape(), self.value(x).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let vd = self.value(v).data();
        for (plane, &b) in out.data.chunks_mut(h * w).zip(vd) {
            for p in plane {
                *p = *p + b;
            }
        }
        Ok(self.record(out, Op::AddChannel(x, v), &[x, v]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let bt = b.map(|b| self.value(b));
        let (_, geom) = ConvGeom::new(xt, wt, bt, stride, padding)?;
        let out = kernels::conv2d(xt, wt, bt, stride, padding)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(out, Op::Conv { x, w, b, geom }, &parents))
    }

    /// `x: [N,in]`, `w: [out,in]`, `b: [out]` -> `[N,out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (&[n, fin], &[fout, win]) = (xt.shape(), wt.shape()) else {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?} must be 2-D", xt.shape(), wt.shape()),
            ));
        };
        if fin != win {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xt.shape(), wt.shape()),
            ));
        }
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [fout] {
                return Err(Error::shape("linear", format!("bias {:?} vs weight {:?}", bt.shape(), wt.shape())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bt.data());
            }
        }
        gemm(n, fin, fout, MatRef::n(xt.data()), MatRef::t(wt.data()), &mut out, b.is_some());
        let mut parents = vec![x, w];
        parents.extend(b);
        let out = Tensor::new(vec![n, fout], out)?;
        Ok(self.record(out, Op::Linear { x, w, b }, &parents))
    }

    /// Group normalization over `[N,C,H,W]` with per-channel affine `gamma`, `beta`.
    /// The group count is the largest divisor of C not exceeding 32.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "group_norm",
                format!("affine params must be [{c}], got {:?}/{:?}", self.value(gamma).shape(), self.value(beta).shape()),
            ));
        }
        let groups = kernels::group_count(c);
        if c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        let xt = self.value(x);
        let (means, inv_std) = kernels::group_norm_stats(xt, groups);
        let per_group = (c / groups) * h * w;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xt.clone();
        for (gi, chunk) in out.data.chunks_mut(per_group).enumerate() {
            let (m, s) = (means[gi], inv_std[gi]);
            let ch0 = (gi % groups) * (c / groups);
            for (j, v) in chunk.iter_mut().enumerate() {
                let ch = ch0 + j / (h * w);
                *v = (*v - m) * s * g[ch] + b[ch];
            }
        }
        Ok(self.record(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.record(out, Op::Silu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.record(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        Ok(self.record(out, Op::Upsample2x(x), &[x]))
    }

    /// Channel concatenation of `[N,Ca,H,W]` and `[N,Cb,H,W]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = Vec::with_capacity(na * (ca + cb) * ha * wa);
        for i in 0..na {
            out.extend_from_slice(self.value(a).batch_item(i));
            out.extend_from_slice(self.value(b).batch_item(i));
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        Ok(self.record(out, Op::Concat(a, b), &[a, b]))
    }

    /// Softmax attention over the flattened spatial axis of `[N,C,H,W]`
    /// query/key/value maps, with C split evenly into `heads`.
    pub fn attention_core(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (n, c, h, w) = self.value(q).dims4()?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "attention: {c} channels not divisible by {heads} heads"
            )));
        }
        let (out, weights) = kernels::attention_core(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            c,
            h * w,
            heads,
        );
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.record(out, Op::Attention { q, k, v, heads, weights }, &[q, k, v]))
    }

    /// Multi-head self-attention layer with residual connection:
    /// `x + W_o * attn(W_q h, W_k h, W_v h)` where `h` is `x`, optionally group-normalized.
    pub fn attention(&mut self, x: Var, heads: usize, p: &AttentionVars) -> Result<Var> {
        let c = self.value(x).dims4()?.1;
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "attention: {c} channels not divisible by {heads} heads"
            )));
        }
        let h = match p.norm {
            Some((g, b)) => self.group_norm(x, g, b)?,
            None => x,
        };
        let q = self.conv2d(h, p.q.0, Some(p.q.1), 1, 0)?;
        let k = self.conv2d(h, p.k.0, Some(p.k.1), 1, 0)?;
        let v = self.conv2d(h, p.v.0, Some(p.v.1), 1, 0)?;
        let a = self.attention_core(q, k, v, heads)?;
        let o = self.conv2d(a, p.out.0, Some(p.out.1), 1, 0)?;
        self.add(x, o)
    }

    /// Gathers rows of a `[rows, d]` table into `[len(indices), d]`. Indices are 0-based.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [rows, d] = t.shape()[..] else {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {:?}", t.shape())));
        };
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding row",
                    index: i + 1,
                    max: rows,
                });
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.record(
            out,
            Op::Embedding {
                table,
                rows: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean squared error, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = T::of(ta.numel() as f64);
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.record(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.record(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_op(&node.op, &node.value, &dy, &mut grads);
            // keep the gradient of intermediates available to callers
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let like = |v: Var, data: Vec<T>| Tensor {
            shape: self.value(v).shape().to_vec(),
            data,
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = dy.data().iter().zip(self.value(*b).data()).map(|(&g, &y)| g * y).collect();
                    acc(*a, like(*a, d));
                }
                if self.rg(*b) {
                    let d = dy.data().iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).collect();
                    acc(*b, like(*b, d));
                }
            }
            Op::Scale(a, s) => acc(*a, dy.map(|g| g * *s)),
            Op::AddChannel(x, v) => {
                acc(*x, dy.clone());
                if self.rg(*v) {
                    let (_, _, h, w) = dy.dims4().expect("4-D");
                    let d = dy.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                    acc(*v, like(*v, d));
                }
            }
            Op::Conv { x, w, b, geom } => {
                let mut dx = self.rg(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                let mut db = b.filter(|b| self.rg(*b)).map(|b| vec![T::zero(); self.value(b).numel()]);
                kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    geom,
                    dy,
                    dx.as_mut(),
                    dw.as_mut(),
                    db.as_mut(),
                );
                if let Some(d) = dx {
                    acc(*x, like(*x, d));
                }
                if let Some(d) = dw {
                    acc(*w, like(*w, d));
                }
                if let (Some(b), Some(d)) = (b, db) {
                    acc(*b, like(*b, d));
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, fin) = (xt.shape()[0], xt.shape()[1]);
                let fout = wt.shape()[0];
                if self.rg(*x) {
                    let mut d = vec![T::zero(); n * fin];
                    gemm(n, fout, fin, MatRef::n(dy.data()), MatRef::n(wt.data()), &mut d, false);
                    acc(*x, like(*x, d));
                }
                if self.rg(*w) {
                    let mut d = vec![T::zero(); fout * fin];
                    gemm(fout, n, fin, MatRef::t(dy.data()), MatRef::n(xt.data()), &mut d, false);
                    acc(*w, like(*w, d));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut d = vec![T::zero(); fout];
                    for row in dy.data().chunks(fout) {
                        for (a, &g) in d.iter_mut().zip(row) {
                            *a = *a + g;
                        }
                    }
                    acc(b, like(b, d));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                inv_std,
            } => {
                let xt = self.value(*x);
                let (_, c, h, w) = xt.dims4().expect("4-D");
                let hw = h * w;
                let cpg = c / groups;
                let per_group = cpg * hw;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xt.numel()];
                let m = T::of(per_group as f64);
                for (gi, ((xc, dyc), dxc)) in xt
                    .data()
                    .chunks(per_group)
                    .zip(dy.data().chunks(per_group))
                    .zip(dx.chunks_mut(per_group))
                    .enumerate()
                {
                    let (mean, s) = (means[gi], inv_std[gi]);
                    let ch0 = (gi % groups) * cpg;
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..per_group {
                        let ch = ch0 + j / hw;
                        let xhat = (xc[j] - mean) * s;
                        dgamma[ch] = dgamma[ch] + dyc[j] * xhat;
                        dbeta[ch] = dbeta[ch] + dyc[j];
                        let dxhat = dyc[j] * g[ch];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    for j in 0..per_group {
                        let ch = ch0 + j / hw;
                        let xhat = (xc[j] - mean) * s;
                        let dxhat = dyc[j] * g[ch];
                        dxc[j] = s / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                acc(*x, like(*x, dx));
                acc(*gamma, like(*gamma, dgamma));
                acc(*beta, like(*beta, dbeta));
            }
            Op::Silu(x) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| {
                        let sig = T::one() / (T::one() + (-v).exp());
                        g * sig * (T::one() + v * (T::one() - sig))
                    })
                    .collect();
                acc(*x, like(*x, d));
            }
            Op::LeakyRelu(x, slope) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                acc(*x, like(*x, d));
            }
            Op::Upsample2x(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("4-D");
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (plane, src) in d.chunks_mut(h * w).zip(dy.data().chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let t = &mut plane[(y / 2) * w + xx / 2];
                            *t = *t + src[y * 2 * w + xx];
                        }
                    }
                }
                acc(*x, like(*x, d));
            }
            Op::Concat(a, b) => {
                let n = out.shape()[0];
                let la = self.value(*a).numel() / n;
                let lb = self.value(*b).numel() / n;
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for i in 0..n {
                    let item = dy.batch_item(i);
                    da.extend_from_slice(&item[..la]);
                    db.extend_from_slice(&item[la..]);
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Attention { q, k, v, heads, weights } => {
                let (n, c, h, w) = out.dims4().expect("4-D");
                let (dq, dk, dv) = kernels::attention_core_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    weights,
                    dy.data(),
                    n,
                    c,
                    h * w,
                    *heads,
                );
                acc(*q, like(*q, dq));
                acc(*k, like(*k, dk));
                acc(*v, like(*v, dv));
            }
            Op::Embedding { table, rows } => {
                let d = self.value(*table).shape()[1];
                let mut g = vec![T::zero(); self.value(*table).numel()];
                for (r, src) in rows.iter().zip(dy.data().chunks(d)) {
                    for (t, &s) in g[r * d..(r + 1) * d].iter_mut().zip(src) {
                        *t = *t + s;
                    }
                }
                acc(*table, like(*table, g));
            }
            Op::Mse(a, b) => {
                let g = dy.data()[0];
                let n = T::of(self.value(*a).numel() as f64);
                let two = T::of(2.0);
                let diff: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| two * (x - y) / n * g)
                    .collect();
                if self.rg(*b) {
                    acc(*b, like(*b, diff.iter().map(|&d| -d).collect()));
                }
                acc(*a, like(*a, diff));
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape().to_vec(), g));
            }
        }
    }
}
