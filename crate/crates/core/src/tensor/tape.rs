//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and the information
//! its backward rule needs. Nodes are only ever appended, so the tape order is
//! a topological order and [`Tape::backward`] walks it once in reverse.

use std::borrow::Cow;

use super::broadcast::Broadcast;
use super::real::{gemm, MatLayout};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { a: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LayerNorm { a: Var, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    L2Norm { a: Var, axis: usize },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph under construction. Leaves may borrow parameter
/// tensors for the lifetime `'a`, so binding parameters costs no copies.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    kinks: usize,
}

/// Gradients of a scalar loss w.r.t. every leaf created with `requires_grad`.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Dimensions of the leading batch block and trailing matrix of a rank≥2 shape.
fn split_matrix(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kinks: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nondifferentiable points (ReLU input exactly 0) visited so far.
    pub fn kinks(&self) -> usize {
        self.kinks
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

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Borrowed leaf; no copy of `t` is made.
    pub fn leaf_ref(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    // ---------------------------------------------------------------- matmul

    /// `a: [..., m, k]` times `b: [k, n]` (shared) or `b: [..., k, n]` (same batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`matmul`](Self::matmul) with the last two axes of `b` transposed (`b: [..., n, k]`).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need rank >= 2, got {:?} and {:?}", sa, sb),
            ));
        }
        let (_, m, k) = split_matrix(&sa);
        let (bb, r, c) = split_matrix(&sb);
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let shared = sb.len() == 2;
        if !shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(
                "matmul",
                format!("batch extents differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let lb = if trans_b {
            MatLayout::row_major(n, k).t()
        } else {
            MatLayout::row_major(k, n)
        };
        if shared {
            let rows = ad.len() / k.max(1);
            if k == 0 {
                // empty contraction, result stays zero
            } else {
                gemm(
                    T::one(),
                    ad,
                    MatLayout::row_major(rows, k),
                    bd,
                    lb,
                    T::zero(),
                    &mut out,
                    MatLayout::row_major(rows, n),
                );
            }
        } else {
            for i in 0..bb {
                gemm(
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    MatLayout::row_major(m, k),
                    &bd[i * k * n..(i + 1) * k * n],
                    lb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    MatLayout::row_major(m, n),
                );
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push_op(t, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    // ----------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let bc = Broadcast::new(name, self.shape(a), self.shape(b))?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(bc.numel());
        bc.for_each(|_, ia, ib| out.push(f(ad[ia], bd[ib])));
        let t = Tensor::new(bc.out.clone(), out)?;
        Ok(self.push_op(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        self.push_op(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let zeros = self
            .value(a)
            .data()
            .iter()
            .filter(|x| **x == T::zero())
            .count();
        self.kinks += zeros;
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    /// Tanh approximation of GeLU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_value, Op::Gelu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), Op::Cos(a))
    }

    // ----------------------------------------------------------------- shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != src.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", src.shape(), shape),
            ));
        }
        let t = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        Ok(self.push_op(t, Op::Reshape(a), &[a]))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if i >= rank || j >= rank {
            return Err(Error::shape(
                "transpose",
                format!("axes ({i},{j}) out of range for rank {rank}"),
            ));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(i, j);
        self.permute(a, &perm)
    }

    /// Output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation of rank {}", perm, shape.len()),
            ));
        }
        let t = permute_tensor(self.value(a), perm);
        Ok(self.push_op(t, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", base)));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d])
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {axis}", s, base),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut s = shape;
        s[axis] = end - start;
        let t = Tensor::new(s, out)?;
        Ok(self.push_op(t, Op::Slice { a, axis, start }, &[a]))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / T::of(t.len() as f64);
        self.push_op(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", shape)));
        }
        let (outer, ext, inner) = axis_blocks(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst = *dst + x;
                }
            }
        }
        let mut s = shape;
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push_op(t, Op::SumAxis(a, axis), &[a]))
    }

    /// L2 norm over `axis`, keeping it with extent 1.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("l2_norm", format!("axis {axis} of {:?}", shape)));
        }
        let (outer, ext, inner) = axis_blocks(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst = *dst + x * x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x = x.sqrt());
        let mut s = shape;
        s[axis] = 1;
        let t = Tensor::new(s, out)?;
        Ok(self.push_op(t, Op::L2Norm { a, axis }, &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = *src.shape().last().expect("rank >= 1");
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push_op(t, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = *src.shape().last().expect("rank >= 1");
        let nf = T::of(n as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut out = src.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_mut(n.max(1)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push_op(t, Op::LayerNorm { a, rstd }, &[a])
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.back_matmul(*a, *b, *trans_b, g, grads),
            Op::Add(a, b) => self.back_binary(*a, *b, g, grads, |_, _| (T::one(), T::one())),
            Op::Sub(a, b) => self.back_binary(*a, *b, g, grads, |_, _| (T::one(), -T::one())),
            Op::Mul(a, b) => self.back_binary(*a, *b, g, grads, |x, y| (y, x)),
            Op::Div(a, b) => {
                self.back_binary(*a, *b, g, grads, |x, y| (T::one() / y, -x / (y * y)))
            }
            Op::Scale(a, c) => self.back_unary(*a, g, grads, |_, _| *c),
            Op::AddScalar(a) | Op::Reshape(a) => self.back_unary(*a, g, grads, |_, _| T::one()),
            Op::Relu(a) => self.back_unary(*a, g, grads, |x, _| {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Gelu(a) => self.back_unary(*a, g, grads, |x, _| gelu_grad(x)),
            Op::Sin(a) => self.back_unary(*a, g, grads, |x, _| x.cos()),
            Op::Cos(a) => self.back_unary(*a, g, grads, |x, _| -x.sin()),
            Op::Permute(a, perm) => {
                if !self.wants(*a) {
                    return;
                }
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("shape");
                let back = permute_tensor(&gt, &inv);
                add_into(acc(grads, *a, back.len()), back.data());
            }
            Op::Concat(inputs, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let ext = self.shape(*v)[*axis];
                    if self.wants(*v) {
                        let n = self.value(*v).len();
                        let dst = acc(grads, *v, n);
                        let chunk = ext * inner;
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..chunk];
                            add_into(&mut dst[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { a, axis, start } => {
                if !self.wants(*a) {
                    return;
                }
                let in_shape = self.shape(*a);
                let ext_in = in_shape[*axis];
                let ext_out = node.value.shape()[*axis];
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let dst = acc(grads, *a, self.value(*a).len());
                for o in 0..outer {
                    let d = &mut dst[(o * ext_in + start) * inner..][..ext_out * inner];
                    add_into(d, &g[o * ext_out * inner..(o + 1) * ext_out * inner]);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    acc(grads, *a, n).iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let s = g[0] / T::of(n as f64);
                    acc(grads, *a, n).iter_mut().for_each(|x| *x = *x + s);
                }
            }
            Op::SumAxis(a, axis) => {
                if !self.wants(*a) {
                    return;
                }
                let (outer, ext, inner) = axis_blocks(self.shape(*a), *axis);
                let dst = acc(grads, *a, outer * ext * inner);
                for o in 0..outer {
                    for e in 0..ext {
                        add_into(
                            &mut dst[(o * ext + e) * inner..(o * ext + e + 1) * inner],
                            &g[o * inner..(o + 1) * inner],
                        );
                    }
                }
            }
            Op::L2Norm { a, axis } => {
                if !self.wants(*a) {
                    return;
                }
                let x = self.value(*a).data();
                let (outer, ext, inner) = axis_blocks(self.shape(*a), *axis);
                let dst = acc(grads, *a, x.len());
                for o in 0..outer {
                    for e in 0..ext {
                        for j in 0..inner {
                            let n = y[o * inner + j];
                            if n > T::zero() {
                                let idx = (o * ext + e) * inner + j;
                                dst[idx] = dst[idx] + g[o * inner + j] * x[idx] / n;
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if !self.wants(*a) {
                    return;
                }
                let n = *node.value.shape().last().expect("rank");
                let dst = acc(grads, *a, y.len());
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dst.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                if !self.wants(*a) {
                    return;
                }
                let n = *node.value.shape().last().expect("rank");
                let nf = T::of(n as f64);
                let dst = acc(grads, *a, y.len());
                for (r, ((yr, gr), dr)) in y
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(dst.chunks_mut(n))
                    .enumerate()
                {
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / nf;
                    for j in 0..n {
                        dr[j] = dr[j] + rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
        }
    }

    fn back_unary(
        &self,
        a: Var,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        d: impl Fn(T, T) -> T,
    ) {
        if !self.wants(a) {
            return;
        }
        let x = self.value(a).data();
        let dst = acc(grads, a, x.len());
        for j in 0..x.len() {
            dst[j] = dst[j] + g[j] * d(x[j], g[j]);
        }
    }

    fn back_binary(
        &self,
        a: Var,
        b: Var,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        d: impl Fn(T, T) -> (T, T),
    ) {
        let ta = self.value(a);
        let tb = self.value(b);
        let bc = Broadcast::new("backward", ta.shape(), tb.shape()).expect("checked in forward");
        let (ad, bd) = (ta.data(), tb.data());
        if self.wants(a) {
            let dst = acc(grads, a, ad.len());
            bc.for_each(|i, ia, ib| dst[ia] = dst[ia] + g[i] * d(ad[ia], bd[ib]).0);
        }
        if self.wants(b) {
            let dst = acc(grads, b, bd.len());
            bc.for_each(|i, ia, ib| dst[ib] = dst[ib] + g[i] * d(ad[ia], bd[ib]).1);
        }
    }

    fn back_matmul(&self, a: Var, b: Var, trans_b: bool, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let ta = self.value(a);
        let tb = self.value(b);
        let (_, m, k) = split_matrix(ta.shape());
        let (bb, r, c) = split_matrix(tb.shape());
        let n = if trans_b { r } else { c };
        // layout of op(b) as a k×n matrix over b's storage
        let lb = if trans_b {
            MatLayout::row_major(n, k).t()
        } else {
            MatLayout::row_major(k, n)
        };
        let shared = tb.rank() == 2;
        let (ad, bd) = (ta.data(), tb.data());
        if shared {
            let rows = ad.len() / k.max(1);
            if self.wants(a) {
                let dst = acc(grads, a, ad.len());
                gemm(
                    T::one(),
                    g,
                    MatLayout::row_major(rows, n),
                    bd,
                    lb.t(),
                    T::one(),
                    dst,
                    MatLayout::row_major(rows, k),
                );
            }
            if self.wants(b) {
                let dst = acc(grads, b, bd.len());
                gemm(
                    T::one(),
                    ad,
                    MatLayout::row_major(rows, k).t(),
                    g,
                    MatLayout::row_major(rows, n),
                    T::one(),
                    dst,
                    lb,
                );
            }
        } else {
            if self.wants(a) {
                let dst = acc(grads, a, ad.len());
                for i in 0..bb {
                    gemm(
                        T::one(),
                        &g[i * m * n..(i + 1) * m * n],
                        MatLayout::row_major(m, n),
                        &bd[i * k * n..(i + 1) * k * n],
                        lb.t(),
                        T::one(),
                        &mut dst[i * m * k..(i + 1) * m * k],
                        MatLayout::row_major(m, k),
                    );
                }
            }
            if self.wants(b) {
                let dst = acc(grads, b, bd.len());
                for i in 0..bb {
                    gemm(
                        T::one(),
                        &ad[i * m * k..(i + 1) * m * k],
                        MatLayout::row_major(m, k).t(),
                        &g[i * m * n..(i + 1) * m * n],
                        MatLayout::row_major(m, n),
                        T::one(),
                        &mut dst[i * k * n..(i + 1) * k * n],
                        lb,
                    );
                }
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn permute_tensor<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    // a trailing axis that stays in place is copied as a contiguous run
    let run = if rank > 0 && perm[rank - 1] == rank - 1 { shape[rank - 1] } else { 1 };
    let outer_rank = if run > 1 { rank - 1 } else { rank };
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    while out.len() < src.len() {
        out.extend_from_slice(&src[off..off + run]);
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn tanh_via_exp<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_value<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + tanh_via_exp(c * (x + a * x * x * x)))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = tanh_via_exp(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
