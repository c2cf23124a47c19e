//! Define-by-run tape: every operation on a [`Var`] appends a node holding
//! its output value and enough context to replay the chain rule backwards.

use std::cell::RefCell;
use std::fmt;

use crate::diffcore::kernels::{self, BinKind, UnKind};
use crate::diffcore::tensor::{numel, Tensor};
use crate::diffcore::Real;
use crate::error::{Error, Result};

pub(crate) enum Op<T> {
    Leaf,
    Binary { kind: BinKind, a: usize, b: usize },
    Unary { kind: UnKind, a: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, s: T },
    PowScalar { a: usize, p: T },
    SumAxis { a: usize, axis: usize },
    SumAll { a: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    PadReplicate { a: usize, pad: usize },
    AvgPool2d { a: usize, k: usize },
    Upsample { a: usize, s: usize },
    MatMul { a: usize, b: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    done: bool,
}

/// Recorded computation graph for one forward/backward pass.
pub struct Tape<T: Real> {
    inner: RefCell<Inner<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { inner: RefCell::new(Inner { nodes: Vec::new(), grads: Vec::new(), done: false }) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: inner.nodes.len() - 1 }
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    /// Reverse pass from `loss`. May run once per tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.done {
            return Err(Error::BackwardTwice);
        }
        let shape = inner.nodes[loss.id].value.shape().to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NotScalar(shape));
        }
        inner.done = true;
        let Inner { nodes, grads, .. } = &mut *inner;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        grads[loss.id] = Some(Tensor::ones(&shape));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(nodes, grads, id, &g);
        }
        Ok(())
    }

    /// Gradient accumulated for `v` by the last backward; zeros when `v` was
    /// not reached.
    pub fn grad(&self, v: Var<'_, T>) -> Tensor<T> {
        let inner = self.inner.borrow();
        match inner.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(inner.nodes[v.id].value.shape()),
        }
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(g.data_mut());
}

/// Like [`accumulate`] for a freshly computed gradient; the first
/// contribution is moved in rather than added to zeros.
fn accumulate_owned<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, data: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => add_into(g.data_mut(), &data),
        slot => *slot = Some(Tensor::new(nodes[id].value.shape(), data).expect("gradient matches value shape")),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: &Tensor<T>) {
    let out = &nodes[id].value;
    let gy = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (need_a, need_b) = (nodes[*a].requires_grad, nodes[*b].requires_grad);
            let (ga, gb) = kernels::binary_backward(*kind, av, bv, out.shape(), gy, need_a, need_b);
            if let Some(ga) = ga {
                accumulate_owned(nodes, grads, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate_owned(nodes, grads, *b, gb);
            }
        }
        Op::Unary { kind, a } => {
            let x = nodes[*a].value.data();
            let y = out.data();
            let kind = *kind;
            let d = (0..gy.len()).map(|i| gy[i] * kernels::unary_derivative(kind, x[i], y[i])).collect();
            accumulate_owned(nodes, grads, *a, d);
        }
        Op::AddScalar { a } => accumulate(nodes, grads, *a, |d| add_into(d, gy)),
        Op::MulScalar { a, s } => {
            let s = *s;
            accumulate_owned(nodes, grads, *a, gy.iter().map(|&g| g * s).collect());
        }
        Op::PowScalar { a, p } => {
            let x = nodes[*a].value.data();
            let p = *p;
            accumulate(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gy[i] * p * x[i].powf(p - T::one());
                }
            });
        }
        Op::SumAxis { a, axis } => {
            let shape = nodes[*a].value.shape();
            let (outer, len, inner) = kernels::split_axis(shape, *axis);
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        let src = &gy[o * inner..(o + 1) * inner];
                        add_into(dst, src);
                    }
                }
            });
        }
        Op::SumAll { a } => {
            let g0 = gy[0];
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
        }
        Op::Reshape { a } => accumulate(nodes, grads, *a, |d| add_into(d, gy)),
        Op::Permute { a, perm } => {
            let in_shape = nodes[*a].value.shape();
            let map = kernels::permute_map(in_shape, perm);
            accumulate(nodes, grads, *a, |d| {
                for (o, &i) in map.iter().enumerate() {
                    d[i] += gy[o];
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = kernels::split_axis(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                accumulate(nodes, grads, inp, |d| {
                    for o in 0..outer {
                        let src = &gy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                    }
                });
                offset += len;
            }
        }
        Op::Narrow { a, axis, start } => {
            let in_shape = nodes[*a].value.shape();
            let (outer, total, inner) = kernels::split_axis(in_shape, *axis);
            let len = out.shape()[*axis];
            let start = *start;
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * total + start) * inner..(o * total + start + len) * inner];
                    add_into(dst, &gy[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let geo = kernels::ConvGeom::new(nodes[*x].value.shape(), nodes[*w].value.shape(), *stride, *pad)
                .expect("validated in forward");
            let xv = nodes[*x].value.data();
            let wv = nodes[*w].value.data();
            let want_x = nodes[*x].requires_grad;
            let want_w = nodes[*w].requires_grad;
            let (dx, dw) = kernels::conv2d_backward(&geo, xv, wv, gy, want_x, want_w);
            if let Some(dx) = dx {
                accumulate_owned(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate_owned(nodes, grads, *w, dw);
            }
            if let Some(b) = b {
                let (n, co, p) = (geo.n, geo.cout, geo.out_h * geo.out_w);
                accumulate(nodes, grads, *b, |d| {
                    for i in 0..n {
                        for c in 0..co {
                            let s: T = gy[(i * co + c) * p..(i * co + c + 1) * p].iter().copied().sum();
                            d[c] += s;
                        }
                    }
                });
            }
        }
        Op::PadReplicate { a, pad } => {
            let shape = nodes[*a].value.shape();
            accumulate(nodes, grads, *a, |d| kernels::pad_replicate_backward(shape, *pad, gy, d));
        }
        Op::AvgPool2d { a, k } => {
            let shape = nodes[*a].value.shape();
            accumulate(nodes, grads, *a, |d| kernels::avg_pool_backward(shape, *k, gy, d));
        }
        Op::Upsample { a, s } => {
            let shape = nodes[*a].value.shape();
            accumulate(nodes, grads, *a, |d| kernels::upsample_backward(shape, *s, gy, d));
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (ga, gb) = kernels::matmul_backward(av, bv, gy, nodes[*a].requires_grad, nodes[*b].requires_grad);
            if let Some(ga) = ga {
                accumulate_owned(nodes, grads, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate_owned(nodes, grads, *b, gb);
            }
        }
        Op::Softmax { a, axis } => {
            let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
            let y = out.data();
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot += gy[base + l * inner] * y[base + l * inner];
                        }
                        for l in 0..len {
                            let k = base + l * inner;
                            d[k] += y[k] * (gy[k] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, axis } => {
            let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
            let y = out.data();
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut sum = T::zero();
                        for l in 0..len {
                            sum += gy[base + l * inner];
                        }
                        for l in 0..len {
                            let k = base + l * inner;
                            d[k] += gy[k] - y[k].exp() * sum;
                        }
                    }
                }
            });
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// Arithmetic is fallible (shape checks), so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.with_value(|v| v.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Tensor<T> {
        self.tape.grad(*self)
    }

    fn unary_op(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t, T>, kind: BinKind, name: &'static str) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let value = kernels::binary_forward(kind, &a.value, &b.value)
                .ok_or_else(|| Error::shape(name, a.value.shape(), b.value.shape()))?;
            (value, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, Op::Binary { kind, a: self.id, b: other.id }, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Div, "div")
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Max, "maximum")
    }

    fn unary(self, kind: UnKind) -> Var<'t, T> {
        let value = self.with_value(|v| v.map(|x| kernels::unary_forward(kind, x)));
        self.unary_op(value, Op::Unary { kind, a: self.id })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(UnKind::Neg)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnKind::Exp)
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(UnKind::Log)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(UnKind::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnKind::Relu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(UnKind::Gelu)
    }

    /// |x|; subgradient 0 at 0.
    pub fn abs(self) -> Var<'t, T> {
        self.unary(UnKind::Abs)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(UnKind::Sqrt)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(UnKind::Square)
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let value = self.with_value(|v| v.map(|x| x + s));
        self.unary_op(value, Op::AddScalar { a: self.id })
    }

    pub fn mul_scalar(self, s: T) -> Var<'t, T> {
        let value = self.with_value(|v| v.map(|x| x * s));
        self.unary_op(value, Op::MulScalar { a: self.id, s })
    }

    pub fn powf(self, p: T) -> Var<'t, T> {
        let value = self.with_value(|v| v.map(|x| x.powf(p)));
        self.unary_op(value, Op::PowScalar { a: self.id, p })
    }

    /// New leaf holding the same value, cut off from the graph.
    pub fn detach(self) -> Var<'t, T> {
        let value = self.value();
        self.tape.constant(value)
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = self.with_value(|v| Tensor::scalar(v.data().iter().copied().sum()));
        self.unary_op(value, Op::SumAll { a: self.id })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.with_value(|v| v.numel());
        self.sum().mul_scalar(T::one() / T::lit(n as f64))
    }

    /// Sum over one axis. With `keepdim` the axis stays with extent 1.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| {
            if axis >= v.ndim() {
                return Err(Error::invalid("sum_axis", format!("axis {axis} for shape {:?}", v.shape())));
            }
            let (outer, len, inner) = kernels::split_axis(v.shape(), axis);
            let x = v.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                    add_into(&mut out[o * inner..(o + 1) * inner], src);
                }
            }
            let mut shape = v.shape().to_vec();
            if keepdim {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            Tensor::new(&shape, out)
        })?;
        Ok(self.unary_op(value, Op::SumAxis { a: self.id, axis }))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(T::one() / T::lit(len as f64)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshaped(shape)?;
        Ok(self.unary_op(value, Op::Reshape { a: self.id }))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| {
            let mut seen = vec![false; v.ndim()];
            if perm.len() != v.ndim() || perm.iter().any(|&p| p >= v.ndim() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::invalid("permute", format!("{perm:?} for shape {:?}", v.shape())));
            }
            let map = kernels::permute_map(v.shape(), perm);
            let x = v.data();
            let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
            Tensor::new(&shape, map.iter().map(|&i| x[i]).collect())
        })?;
        Ok(self.unary_op(value, Op::Permute { a: self.id, perm: perm.to_vec() }))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::invalid("transpose", format!("axes {a},{b} for shape {:?}", self.shape())));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| {
            if axis >= v.ndim() || start + len > v.shape()[axis] {
                return Err(Error::invalid("narrow", format!("axis {axis} [{start}, +{len}) of {:?}", v.shape())));
            }
            let (outer, total, inner) = kernels::split_axis(v.shape(), axis);
            let x = v.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * total + start) * inner..(o * total + start + len) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, out)
        })?;
        Ok(self.unary_op(value, Op::Narrow { a: self.id, axis, start }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let (value, rg) = {
            let inner = tape.inner.borrow();
            let vals: Vec<&Tensor<T>> = parts.iter().map(|p| &inner.nodes[p.id].value).collect();
            let s0 = vals[0].shape();
            if axis >= s0.len() {
                return Err(Error::invalid("concat", format!("axis {axis} for shape {s0:?}")));
            }
            for v in &vals[1..] {
                let s = v.shape();
                if s.len() != s0.len() || s.iter().zip(s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                    return Err(Error::shape("concat", s0, s));
                }
            }
            let (outer, _, inner_sz) = kernels::split_axis(s0, axis);
            let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner_sz);
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis];
                    out.extend_from_slice(&v.data()[o * len * inner_sz..(o + 1) * len * inner_sz]);
                }
            }
            let mut shape = s0.to_vec();
            shape[axis] = total;
            let rg = parts.iter().any(|p| inner.nodes[p.id].requires_grad);
            (Tensor::new(&shape, out)?, rg)
        };
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(value, Op::Concat { inputs, axis }, rg))
    }

    /// 2-D cross-correlation. `self`: N x Cin x H x W, `weight`: Cout x Cin x
    /// kh x kw, `bias`: Cout. Zero padding of `pad` on every side.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let (x, w) = (&inner.nodes[self.id], &inner.nodes[weight.id]);
            let geo = kernels::ConvGeom::new(x.value.shape(), w.value.shape(), stride, pad)?;
            let b = bias.map(|b| &inner.nodes[b.id]);
            if let Some(b) = b {
                if b.value.shape() != [geo.cout] {
                    return Err(Error::shape("conv2d bias", b.value.shape(), &[geo.cout]));
                }
            }
            let out = kernels::conv2d_forward(&geo, x.value.data(), w.value.data(), b.map(|b| b.value.data()));
            let rg = x.requires_grad || w.requires_grad || b.is_some_and(|b| b.requires_grad);
            (Tensor::new(&[geo.n, geo.cout, geo.out_h, geo.out_w], out)?, rg)
        };
        let op = Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), stride, pad };
        Ok(self.tape.push(value, op, rg))
    }

    /// Edge-replicating padding of the two trailing axes.
    pub fn pad_replicate(self, pad: usize) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| kernels::pad_replicate_forward(v, pad))?;
        Ok(self.unary_op(value, Op::PadReplicate { a: self.id, pad }))
    }

    /// Non-overlapping `k x k` mean pooling; trailing rows/columns that do
    /// not fill a window are dropped.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| kernels::avg_pool_forward(v, k))?;
        Ok(self.unary_op(value, Op::AvgPool2d { a: self.id, k }))
    }

    pub fn upsample_nearest(self, s: usize) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| kernels::upsample_forward(v, s))?;
        Ok(self.unary_op(value, Op::Upsample { a: self.id, s }))
    }

    /// Batched matrix product `[.., M, K] x [.., K, N]`. A 2-D right operand
    /// is shared across the batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let v = kernels::matmul_forward(&a.value, &b.value)?;
            (v, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, Op::MatMul { a: self.id, b: other.id }, rg))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| kernels::softmax_forward(v, axis, false))?;
        Ok(self.unary_op(value, Op::Softmax { a: self.id, axis }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| kernels::softmax_forward(v, axis, true))?;
        Ok(self.unary_op(value, Op::LogSoftmax { a: self.id, axis }))
    }
}
