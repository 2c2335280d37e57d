//! Forward and backward kernels on raw buffers.

use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<(usize, Self)> {
        let (n, cin, h, wd) = x.dims4()?;
        let [cout, wcin, kh, kw] = w.shape()[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be 4-D [Cout,Cin,kh,kw], got {:?}", w.shape()),
            ));
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {cin} channels but weight {:?} expects {wcin}",
                    x.shape(),
                    w.shape()
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match weight {:?}", b.shape(), w.shape()),
                ));
            }
        }
        let (Some(oh), Some(ow)) = (
            conv_output_size(h, kh, stride, pad),
            conv_output_size(wd, kw, stride, pad),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} with stride {stride}, padding {pad} does not fit input {:?}",
                    x.shape()
                ),
            ));
        };
        Ok((
            n,
            Self {
                cin,
                h,
                w: wd,
                cout,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
            },
        ))
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad` lies inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.ow);
    // ox * stride + kj - pad <= w - 1
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if hi > lo {
                        let ix0 = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kj);
                if hi <= lo {
                    continue;
                }
                let ix0 = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (j, &v) in line.iter().enumerate() {
                        let d = &mut dst[ix0 + j * g.stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g) = ConvGeom::new(x, w, bias, stride, pad)?;
    let ohw = g.oh * g.ow;
    let k = g.k();
    let mut out = vec![T::zero(); n * g.cout * ohw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * ohw] };
    for i in 0..n {
        let xi = x.batch_item(i);
        let oi = &mut out[i * g.cout * ohw..(i + 1) * g.cout * ohw];
        if let Some(b) = bias {
            for (co, chunk) in oi.chunks_mut(ohw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut cols);
            &cols
        };
        gemm(g.cout, k, ohw, MatRef::n(w.data()), MatRef::n(src), oi, bias.is_some());
    }
    Tensor::new(vec![n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`]; each output slot is filled only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    dy: &Tensor<T>,
    dx: Option<&mut Vec<T>>,
    dw: Option<&mut Vec<T>>,
    db: Option<&mut Vec<T>>,
) {
    let n = x.shape()[0];
    let ohw = g.oh * g.ow;
    let k = g.k();
    if let Some(db) = db {
        for i in 0..n {
            let dyi = dy.batch_item(i);
            for (co, chunk) in dyi.chunks(ohw).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * ohw] };
    if let Some(dw) = dw {
        for i in 0..n {
            let xi = x.batch_item(i);
            let src: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            gemm(g.cout, ohw, k, MatRef::n(dy.batch_item(i)), MatRef::t(src), dw, true);
        }
    }
    if let Some(dx) = dx {
        let per = g.cin * g.h * g.w;
        for i in 0..n {
            let dxi = &mut dx[i * per..(i + 1) * per];
            if g.is_pointwise() {
                gemm(k, g.cout, ohw, MatRef::t(w.data()), MatRef::n(dy.batch_item(i)), dxi, true);
            } else {
                gemm(k, g.cout, ohw, MatRef::t(w.data()), MatRef::n(dy.batch_item(i)), &mut cols, false);
                col2im(&cols, g, dxi);
            }
        }
    }
}

/// Largest divisor of `channels` not exceeding 32: 32 for multiples of 32,
/// `channels` itself below 32.
pub(crate) fn group_count(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-(item, group) statistics; returns `(mean, inv_std)` vectors of length `n * groups`.
pub(crate) fn group_norm_stats<T: Scalar>(x: &Tensor<T>, groups: usize) -> (Vec<T>, Vec<T>) {
    let n = x.shape()[0];
    let per_group = x.numel() / (n * groups);
    let eps = T::of(GROUP_NORM_EPS);
    let mut means = Vec::with_capacity(n * groups);
    let mut inv = Vec::with_capacity(n * groups);
    for chunk in x.data().chunks(per_group) {
        let m = T::of(per_group as f64);
        let mean = chunk.iter().copied().sum::<T>() / m;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        means.push(mean);
        inv.push(T::one() / (var + eps).sqrt());
    }
    (means, inv)
}

/// Scaled dot-product attention on `[N, C, S]` buffers split into heads along C.
/// Returns the output and the softmax weights `[N, heads, S, S]`.
pub(crate) fn attention_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    c: usize,
    s: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = c / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); n * c * s];
    let mut weights = vec![T::zero(); n * heads * s * s];
    for i in 0..n {
        for h in 0..heads {
            let off = i * c * s + h * dh * s;
            let (qh, kh, vh) = (&q[off..off + dh * s], &k[off..off + dh * s], &v[off..off + dh * s]);
            let a = &mut weights[(i * heads + h) * s * s..(i * heads + h + 1) * s * s];
            // logits[sq, sk] = sum_d q[d, sq] k[d, sk]
            gemm(s, dh, s, MatRef::t(qh), MatRef::n(kh), a, false);
            for row in a.chunks_mut(s) {
                let mut mx = T::neg_infinity();
                for v in row.iter_mut() {
                    *v = *v * scale;
                    mx = mx.max(*v);
                }
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum = sum + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
            // out[d, sq] = sum_sk v[d, sk] a[sq, sk]
            gemm(dh, s, s, MatRef::n(vh), MatRef::t(a), &mut out[off..off + dh * s], false);
        }
    }
    (out, weights)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_core_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    weights: &[T],
    dout: &[T],
    n: usize,
    c: usize,
    s: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = c / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); n * c * s];
    let mut dk = vec![T::zero(); n * c * s];
    let mut dv = vec![T::zero(); n * c * s];
    let mut da = vec![T::zero(); s * s];
    for i in 0..n {
        for h in 0..heads {
            let off = i * c * s + h * dh * s;
            let r = off..off + dh * s;
            let a = &weights[(i * heads + h) * s * s..(i * heads + h + 1) * s * s];
            let dout_h = &dout[r.clone()];
            // dv[d, sk] = sum_sq dout[d, sq] a[sq, sk]
            gemm(dh, s, s, MatRef::n(dout_h), MatRef::n(a), &mut dv[r.clone()], false);
            // da[sq, sk] = sum_d dout[d, sq] v[d, sk]
            gemm(s, dh, s, MatRef::t(dout_h), MatRef::n(&v[r.clone()]), &mut da, false);
            for (arow, drow) in a.chunks(s).zip(da.chunks_mut(s)) {
                let dot: T = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                for (d, &p) in drow.iter_mut().zip(arow) {
                    *d = p * (*d - dot) * scale;
                }
            }
            // dq[d, sq] = sum_sk k[d, sk] dlogits[sq, sk]
            gemm(dh, s, s, MatRef::n(&k[r.clone()]), MatRef::t(&da), &mut dq[r.clone()], false);
            // dk[d, sk] = sum_sq q[d, sq] dlogits[sq, sk]
            gemm(dh, s, s, MatRef::n(&q[r.clone()]), MatRef::n(&da), &mut dk[r], false);
        }
    }
    (dq, dk, dv)
}
