//! Forward and backward kernels behind the tape operations.

use crate::diffcore::real::{gemm, MatRef};
use crate::diffcore::tensor::{numel, strides, Tensor};
use crate::diffcore::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Abs,
    Sqrt,
    Square,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn unary_forward<T: Real>(kind: UnKind, x: T) -> T {
    match kind {
        UnKind::Neg => -x,
        UnKind::Exp => x.exp(),
        UnKind::Log => x.ln(),
        UnKind::Tanh => x.tanh(),
        UnKind::Sigmoid => sigmoid(x),
        UnKind::Relu => x.max(T::zero()),
        UnKind::Gelu => {
            // 0.5 (1 + tanh u) == sigmoid(2u)
            let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
            x * sigmoid(u + u)
        }
        UnKind::Abs => x.abs(),
        UnKind::Sqrt => x.sqrt(),
        UnKind::Square => x * x,
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// dy/dx given input `x` and output `y`.
#[inline]
pub(crate) fn unary_derivative<T: Real>(kind: UnKind, x: T, y: T) -> T {
    match kind {
        UnKind::Neg => -T::one(),
        UnKind::Exp => y,
        UnKind::Log => T::one() / x,
        UnKind::Tanh => T::one() - y * y,
        UnKind::Sigmoid => y * (T::one() - y),
        UnKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Gelu => {
            let c = T::lit(GELU_C);
            let a = T::lit(GELU_A);
            // The forward value already holds the gate: y = x * s. Recover it
            // unless x is near zero or the product has lost precision.
            let s = if x.abs() > T::lit(1e-3) && x > T::lit(-8.0) {
                y / x
            } else {
                let u = c * (x + a * x * x * x);
                sigmoid(u + u)
            };
            s + x * (s + s) * (T::one() - s) * c * (T::one() + T::lit(3.0) * a * x * x)
        }
        UnKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Sqrt => T::lit(0.5) / y,
        UnKind::Square => T::lit(2.0) * x,
    }
}

#[inline]
fn bin_apply<T: Real>(kind: BinKind, a: T, b: T) -> T {
    match kind {
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
        BinKind::Mul => a * b,
        BinKind::Div => a / b,
        BinKind::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
    }
}

/// Partial derivatives (d/da, d/db).
#[inline]
fn bin_partials<T: Real>(kind: BinKind, a: T, b: T) -> (T, T) {
    match kind {
        BinKind::Add => (T::one(), T::one()),
        BinKind::Sub => (T::one(), -T::one()),
        BinKind::Mul => (b, a),
        BinKind::Div => (T::one() / b, -a / (b * b)),
        BinKind::Max => {
            if a >= b {
                (T::one(), T::zero())
            } else {
                (T::zero(), T::one())
            }
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast against it. `None` when the shapes are identical.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Option<Vec<usize>> {
    if out_shape == in_shape {
        return None;
    }
    let n = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; n];
    for i in 0..in_shape.len() {
        let o = i + n - in_shape.len();
        eff[o] = if in_shape[i] == 1 { 0 } else { in_strides[i] };
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

pub(crate) fn binary_forward<T: Real>(kind: BinKind, a: &Tensor<T>, b: &Tensor<T>) -> Option<Tensor<T>> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = match (broadcast_map(&shape, a.shape()), broadcast_map(&shape, b.shape())) {
        (None, None) => ad.iter().zip(bd).map(|(&x, &y)| bin_apply(kind, x, y)).collect(),
        (None, Some(_)) if bd.len() == 1 => ad.iter().map(|&x| bin_apply(kind, x, bd[0])).collect(),
        (ma, mb) => (0..numel(&shape))
            .map(|i| {
                let x = ad[ma.as_ref().map_or(i, |m| m[i])];
                let y = bd[mb.as_ref().map_or(i, |m| m[i])];
                bin_apply(kind, x, y)
            })
            .collect(),
    };
    Tensor::new(&shape, data).ok()
}

#[allow(clippy::type_complexity)]
pub(crate) fn binary_backward<T: Real>(
    kind: BinKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    gy: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ma = broadcast_map(out_shape, a.shape());
    let mb = broadcast_map(out_shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let mut ga = need_a.then(|| vec![T::zero(); ad.len()]);
    let mut gb = need_b.then(|| vec![T::zero(); bd.len()]);
    for (i, &g) in gy.iter().enumerate() {
        let ia = ma.as_ref().map_or(i, |m| m[i]);
        let ib = mb.as_ref().map_or(i, |m| m[i]);
        let (pa, pb) = bin_partials(kind, ad[ia], bd[ib]);
        if let Some(ga) = ga.as_mut() {
            ga[ia] += g * pa;
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += g * pb;
        }
    }
    (ga, gb)
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source flat index for every output position of a permutation.
pub(crate) fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = out_shape.len();
    let total = numel(&out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (hp, wp) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if w[2] > hp || w[3] > wp {
            return Err(Error::invalid("conv2d", format!("kernel {w:?} larger than padded input {x:?}")));
        }
        Ok(Self {
            n: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            out_h: (hp - w[2]) / stride + 1,
            out_w: (wp - w[3]) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// One input and one output channel: a plain correlation, where gemm
    /// degenerates to a single row.
    fn single(&self) -> bool {
        self.cin == 1 && self.cout == 1
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is
/// inside the image.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx { ((g.w - 1 + g.pad - kx) / g.stride + 1).min(g.out_w) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let s0 = lo + kx - g.pad;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    } else {
                        for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[(ox + lo) * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let d0 = lo + kx - g.pad;
                        for (d, &v) in dst[d0..d0 + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Visits every in-bounds tap as `(output offset, input offset, tap index)`
/// runs of equal length, one per output row and tap.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let (lo, hi) = valid_cols(g, kx);
            if lo >= hi {
                continue;
            }
            for oy in 0..g.out_h {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let o = oy * g.out_w + lo;
                let i = iy as usize * g.w + lo * g.stride + kx - g.pad;
                f(o, i, ky * g.kw + kx, hi - lo);
            }
        }
    }
}

fn single_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let s = g.stride;
    for_each_tap(g, |o, i, k, len| {
        let wk = w[k];
        for (d, j) in out[o..o + len].iter_mut().zip((0..len).map(|j| i + j * s)) {
            *d += wk * x[j];
        }
    });
}

fn single_backward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], gy: &[T], dx: Option<&mut [T]>, dw: Option<&mut [T]>) {
    let s = g.stride;
    if let Some(dw) = dw {
        for_each_tap(g, |o, i, k, len| {
            let mut acc = T::zero();
            for (gv, j) in gy[o..o + len].iter().zip((0..len).map(|j| i + j * s)) {
                acc += *gv * x[j];
            }
            dw[k] += acc;
        });
    }
    if let Some(dx) = dx {
        for_each_tap(g, |o, i, k, len| {
            let wk = w[k];
            for (gv, j) in gy[o..o + len].iter().zip((0..len).map(|j| i + j * s)) {
                dx[j] += wk * *gv;
            }
        });
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let p = g.out_h * g.out_w;
    let k = g.k();
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = if g.pointwise() || g.single() { Vec::new() } else { vec![T::zero(); k * p] };
    let wm = MatRef::new(w, g.cout, k);
    for i in 0..g.n {
        let xi = &x[i * g.cin * g.h * g.w..(i + 1) * g.cin * g.h * g.w];
        let oi = &mut out[i * g.cout * p..(i + 1) * g.cout * p];
        if g.single() {
            single_forward(g, xi, w, oi);
        } else if g.pointwise() {
            gemm(wm, MatRef::new(xi, k, p), T::zero(), oi);
        } else {
            im2col(g, xi, &mut cols);
            gemm(wm, MatRef::new(&cols, k, p), T::zero(), oi);
        }
        if let Some(b) = b {
            for (c, &bc) in b.iter().enumerate() {
                oi[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_h * g.out_w;
    let k = g.k();
    let img = g.cin * g.h * g.w;
    let mut dx = want_x.then(|| vec![T::zero(); g.n * img]);
    let mut dw = want_w.then(|| vec![T::zero(); g.cout * k]);
    if g.single() {
        for i in 0..g.n {
            let dxi = dx.as_mut().map(|d| &mut d[i * img..(i + 1) * img]);
            single_backward(g, &x[i * img..(i + 1) * img], w, &gy[i * p..(i + 1) * p], dxi, dw.as_deref_mut());
        }
        return (dx, dw);
    }
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let wm = MatRef::new(w, g.cout, k);
    for i in 0..g.n {
        let xi = &x[i * img..(i + 1) * img];
        let gi = MatRef::new(&gy[i * g.cout * p..(i + 1) * g.cout * p], g.cout, p);
        if let Some(dw) = dw.as_mut() {
            if g.pointwise() {
                gemm(gi, MatRef::new(xi, k, p).t(), T::one(), dw);
            } else {
                im2col(g, xi, &mut cols);
                gemm(gi, MatRef::new(&cols, k, p).t(), T::one(), dw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * img..(i + 1) * img];
            if g.pointwise() {
                gemm(wm.t(), gi, T::one(), dxi);
            } else {
                gemm(wm.t(), gi, T::zero(), &mut cols);
                col2im(g, &cols, dxi);
            }
        }
    }
    (dx, dw)
}

fn plane_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(op, format!("needs at least 2 axes, got {shape:?}")));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

pub(crate) fn pad_replicate_forward<T: Real>(v: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(v.shape(), "pad_replicate")?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("pad_replicate", "empty plane"));
    }
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let x = v.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for y in 0..ho {
            let sy = y.saturating_sub(pad).min(h - 1);
            for xx in 0..wo {
                let sx = xx.saturating_sub(pad).min(w - 1);
                out.push(src[sy * w + sx]);
            }
        }
    }
    let mut shape = v.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::new(&shape, out)
}

pub(crate) fn pad_replicate_backward<T: Real>(shape: &[usize], pad: usize, gy: &[T], d: &mut [T]) {
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    let planes = d.len() / (h * w);
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    for pl in 0..planes {
        for y in 0..ho {
            let sy = y.saturating_sub(pad).min(h - 1);
            for xx in 0..wo {
                let sx = xx.saturating_sub(pad).min(w - 1);
                d[pl * h * w + sy * w + sx] += gy[pl * ho * wo + y * wo + xx];
            }
        }
    }
}

pub(crate) fn avg_pool_forward<T: Real>(v: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(v.shape(), "avg_pool2d")?;
    if k == 0 || h < k || w < k {
        return Err(Error::invalid("avg_pool2d", format!("kernel {k} on {h}x{w}")));
    }
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    let x = v.data();
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        s += x[pl * h * w + (oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[pl * ho * wo + oy * wo + ox] = s * scale;
            }
        }
    }
    let mut shape = v.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::new(&shape, out)
}

pub(crate) fn avg_pool_backward<T: Real>(shape: &[usize], k: usize, gy: &[T], d: &mut [T]) {
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    let planes = d.len() / (h * w);
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    for pl in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gy[pl * ho * wo + oy * wo + ox] * scale;
                for dy in 0..k {
                    for dx in 0..k {
                        d[pl * h * w + (oy * k + dy) * w + ox * k + dx] += g;
                    }
                }
            }
        }
    }
}

pub(crate) fn upsample_forward<T: Real>(v: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(v.shape(), "upsample_nearest")?;
    if s == 0 {
        return Err(Error::invalid("upsample_nearest", "scale must be positive"));
    }
    let (ho, wo) = (h * s, w * s);
    let x = v.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        for y in 0..ho {
            let row = &x[pl * h * w + (y / s) * w..][..w];
            for xx in 0..wo {
                out.push(row[xx / s]);
            }
        }
    }
    let mut shape = v.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::new(&shape, out)
}

pub(crate) fn upsample_backward<T: Real>(shape: &[usize], s: usize, gy: &[T], d: &mut [T]) {
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    let planes = d.len() / (h * w);
    let (ho, wo) = (h * s, w * s);
    for pl in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                d[pl * h * w + (y / s) * w + xx / s] += gy[pl * ho * wo + y * wo + xx];
            }
        }
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared_rhs = b.len() == 2;
    if k != k2 || (!shared_rhs && b[..b.len() - 2] != a[..a.len() - 2]) {
        return Err(Error::shape("matmul", a, b));
    }
    Ok(MatMulDims { batch, m, k, n, shared_rhs })
}

pub(crate) fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    if d.shared_rhs {
        gemm(MatRef::new(a.data(), d.batch * d.m, d.k), MatRef::new(b.data(), d.k, d.n), T::zero(), &mut out);
    } else {
        for i in 0..d.batch {
            gemm(
                MatRef::new(&a.data()[i * d.m * d.k..], d.m, d.k),
                MatRef::new(&b.data()[i * d.k * d.n..], d.k, d.n),
                T::zero(),
                &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
            );
        }
    }
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 1] = d.n;
    Tensor::new(&shape, out)
}

#[allow(clippy::type_complexity)]
pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gy: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = need_a.then(|| vec![T::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.numel()]);
    if d.shared_rhs {
        let rows = d.batch * d.m;
        let g = MatRef::new(gy, rows, d.n);
        if let Some(ga) = ga.as_mut() {
            gemm(g, MatRef::new(b.data(), d.k, d.n).t(), T::zero(), ga);
        }
        if let Some(gb) = gb.as_mut() {
            gemm(MatRef::new(a.data(), rows, d.k).t(), g, T::zero(), gb);
        }
    } else {
        for i in 0..d.batch {
            let g = MatRef::new(&gy[i * d.m * d.n..], d.m, d.n);
            if let Some(ga) = ga.as_mut() {
                let bm = MatRef::new(&b.data()[i * d.k * d.n..], d.k, d.n);
                gemm(g, bm.t(), T::zero(), &mut ga[i * d.m * d.k..(i + 1) * d.m * d.k]);
            }
            if let Some(gb) = gb.as_mut() {
                let am = MatRef::new(&a.data()[i * d.m * d.k..], d.m, d.k);
                gemm(am.t(), g, T::zero(), &mut gb[i * d.k * d.n..(i + 1) * d.k * d.n]);
            }
        }
    }
    (ga, gb)
}

pub(crate) fn softmax_forward<T: Real>(v: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    if axis >= v.ndim() {
        return Err(Error::invalid("softmax", format!("axis {axis} for shape {:?}", v.shape())));
    }
    let (outer, len, inner) = split_axis(v.shape(), axis);
    let x = v.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(x[base + l * inner]);
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (x[base + l * inner] - mx).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            if log {
                let lse = mx + sum.ln();
                for l in 0..len {
                    out[base + l * inner] = x[base + l * inner] - lse;
                }
            } else {
                let inv = T::one() / sum;
                for l in 0..len {
                    out[base + l * inner] *= inv;
                }
            }
        }
    }
    Tensor::new(v.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn permute_map_transposes() {
        // 2x3 -> 3x2
        assert_eq!(permute_map(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn conv_output_shape_formula() {
        for (h, k, s, p) in [(8, 3, 1, 1), (9, 3, 2, 1), (7, 5, 1, 0), (10, 1, 1, 0), (11, 3, 3, 2)] {
            let g = ConvGeom::new(&[1, 2, h, h], &[4, 2, k, k], s, p).unwrap();
            assert_eq!(g.out_h, (h + 2 * p - k) / s + 1);
            assert_eq!(g.out_w, g.out_h);
        }
        assert!(ConvGeom::new(&[1, 2, 4, 4], &[4, 3, 3, 3], 1, 0).is_err());
    }
}
