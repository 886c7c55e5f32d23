//! Tape-based reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Graph`] records every op applied during a forward pass. Parameters are
//! read from a borrowed [`ParamStore`] without copying; [`Graph::backward`]
//! returns a [`Gradients`] map that the caller folds back into the store.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::scalar::{gemm, MatView, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Conv2d { x: Var, w: Var, spec: Conv2dSpec },
    NormLast { x: Var, rstd: Vec<T> },
    Softmax(Var),
    Silu(Var),
    Gather { table: Var, ids: Vec<usize> },
    Upsample2x(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded forward computation.
pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(op, format!("{a:?} vs {b:?}"))
}

/// For every element of `a_shape`, the offset of the matching element of a
/// tensor of `b_shape` broadcast against it (numpy rules, `b` right-aligned).
fn broadcast_offsets(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let lead = a_shape.len() - b_shape.len();
    let mut b_strides = vec![0usize; a_shape.len()];
    let mut stride = 1;
    for i in (0..b_shape.len()).rev() {
        let (ad, bd) = (a_shape[lead + i], b_shape[i]);
        if bd == ad {
            b_strides[lead + i] = stride;
        } else if bd != 1 {
            return None;
        }
        stride *= bd;
    }
    let n: usize = a_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Some(out);
    }
    let nd = a_shape.len();
    if nd == 0 {
        out.push(0);
        return Some(out);
    }
    let (inner, istride) = (a_shape[nd - 1], b_strides[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut off = 0usize;
    for _ in 0..n / inner {
        if istride == 0 {
            out.extend(std::iter::repeat_n(off, inner));
        } else {
            out.extend((0..inner).map(|j| off + j * istride));
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            off += b_strides[d];
            if idx[d] < a_shape[d] {
                break;
            }
            off -= b_strides[d] * a_shape[d];
            idx[d] = 0;
        }
    }
    Some(out)
}

fn reduce_to<T: Scalar>(grad: &[T], offsets: &[usize], b_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b_len];
    for (g, &o) in grad.iter().zip(offsets) {
        out[o] += *g;
    }
    out
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` (of `src_shape`) into the layout obtained by permuting its axes.
fn permute_data<T: Scalar>(src: &[T], src_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = src_shape.len();
    let src_strides = strides_of(src_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let jump: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += jump[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= jump[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || spec.stride == 0 {
            return Err(shape_err("conv2d", xs, ws));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        Ok(Self {
            n: xs[0],
            c: xs[1],
            h,
            w,
            o: ws[0],
            kh,
            kw,
            oh: (h + 2 * spec.padding - kh) / spec.stride + 1,
            ow: (w + 2 * spec.padding - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kj - pad`
    /// lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(s) } else { 0 };
        let hi = if self.w + self.pad > kj {
            (self.w + self.pad - kj).div_ceil(s).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.p();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize || lo == hi {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let ix0 = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            drow[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (i, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d = src[ix0 + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.p();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo == hi {
                        continue;
                    }
                    let ix0 = lo * self.stride + kj - self.pad;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[oy * self.ow + lo..oy * self.ow + hi];
                        if self.stride == 1 {
                            for (d, &v) in drow[ix0..ix0 + hi - lo].iter_mut().zip(srow) {
                                *d += v;
                            }
                        } else {
                            for (i, &v) in srow.iter().enumerate() {
                                drow[ix0 + i * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Leading batch count and (rows, cols) of the last two axes.
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    let nd = shape.len();
    match nd {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        _ => (
            shape[..nd - 2].iter().product(),
            shape[nd - 2],
            shape[nd - 1],
        ),
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// A graph that records gradients.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph for inference: nothing requires gradients.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// Input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(value, requires_grad, None)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.leaf(p.tensor.clone(), p.trainable, Some(id));
        self.param_nodes.insert(id, v);
        v
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            return av.zip_map(bv, f);
        }
        let offs = broadcast_offsets(av.shape(), bv.shape())
            .ok_or_else(|| shape_err(name, av.shape(), bv.shape()))?;
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .zip(&offs)
            .map(|(&x, &o)| f(x, bd[o]))
            .collect();
        Tensor::new(av.shape(), data)
    }

    /// `a + b` with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a - b` with `b` broadcast to the shape of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// `a * b` with `b` broadcast to the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Matrix product. `b` is either 2-D (shared across the leading axes of
    /// `a`) or has the same leading batch axes as `a`. With `trans_b` the
    /// last two axes of `b` are read transposed.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ash.is_empty() || bsh.len() < 2 {
            return Err(shape_err("matmul", &ash, &bsh));
        }
        let k = *ash.last().unwrap();
        let (bb, br, bc) = mat_dims(&bsh);
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if bk != k {
            return Err(shape_err("matmul", &ash, &bsh));
        }
        let bview = if trans_b {
            MatView::new(br, bc).t()
        } else {
            MatView::new(br, bc)
        };
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = n;
        let av = self.value(a).data();
        let bvd = self.value(b).data();
        let out = if bsh.len() == 2 {
            let rows: usize = ash[..ash.len() - 1].iter().product();
            let mut c = vec![T::zero(); rows * n];
            gemm(T::one(), av, MatView::new(rows, k), bvd, bview, T::zero(), &mut c);
            c
        } else {
            let (ab, m, ak) = mat_dims(&ash);
            if ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] || ab != bb {
                return Err(shape_err("matmul", &ash, &bsh));
            }
            let mut c = vec![T::zero(); ab * m * n];
            for i in 0..ab {
                gemm(
                    T::one(),
                    &av[i * m * ak..(i + 1) * m * ak],
                    MatView::new(m, ak),
                    &bvd[i * br * bc..(i + 1) * br * bc],
                    bview,
                    T::zero(),
                    &mut c[i * m * n..(i + 1) * m * n],
                );
            }
            c
        };
        let out = Tensor::new(&out_shape, out)?;
        self.push("matmul", out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} on {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(a).data(), &shape, perm);
        let out = Tensor::new(&out_shape, data)?;
        self.push("permute", out, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Concatenate along `axis`; empty inputs are allowed.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push("concat", out, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Cross-correlation of `x` [N,C,H,W] with `w` [O,C,KH,KW].
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let (ckk, p) = (g.ckk(), g.p());
        let mut out = vec![T::zero(); g.n * g.o * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
        for n in 0..g.n {
            let xn = &xd[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            let cm: &[T] = if g.is_pointwise() {
                xn
            } else {
                g.im2col(xn, &mut cols);
                &cols
            };
            gemm(
                T::one(),
                wd,
                MatView::new(g.o, ckk),
                cm,
                MatView::new(ckk, p),
                T::zero(),
                &mut out[n * g.o * p..(n + 1) * g.o * p],
            );
        }
        let out = Tensor::new(&[g.n, g.o, g.oh, g.ow], out)?;
        self.push("conv2d", out, Op::Conv2d { x, w, spec }, &[x, w])
    }

    /// Normalize each row over the last axis to zero mean, unit variance.
    pub fn norm_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("norm_last", "scalar input"))?;
        let xd = self.value(x).data();
        let rows = if d == 0 { 0 } else { xd.len() / d };
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = 1.0 / d as f64;
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() * inv_d;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() * inv_d;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = T::from_f64((v.as_f64() - mean) * rs);
            }
            rstd.push(T::from_f64(rs));
        }
        let out = Tensor::new(&shape, out)?;
        self.push("norm_last", out, Op::NormLast { x, rstd }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        if d > 0 {
            for (row, orow) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = (v - m).exp();
                    s += *o;
                }
                for o in orow.iter_mut() {
                    *o = *o / s;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push("silu", out, Op::Silu(x), &[x])
    }

    /// Rows of `table` [V, D] selected by `ids`; output [ids.len(), D].
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("gather", format!("ids out of range for {shape:?}")));
        }
        let d = shape[1];
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        self.push("gather", out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Nearest-neighbour 2x upsampling of [N,C,H,W].
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len() * 4);
        for plane in xd.chunks_exact((h * w).max(1)).take(s[0] * s[1]) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        self.push("upsample2x", out, Op::Upsample2x(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Mean of `(a - b)^2` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: Vec::new(),
            inputs: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape(), g)?;
                match node.param {
                    Some(id) => out.params.push((id, t)),
                    None => {
                        out.inputs.insert(Var(i), t);
                    }
                }
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                self.accumulate(grads, *a, g.to_vec());
                if self.nodes[b.0].requires_grad {
                    let bs = self.shape(*b);
                    let mut gb = if bs == node.value.shape() {
                        g.to_vec()
                    } else {
                        let offs = broadcast_offsets(node.value.shape(), bs).expect("checked in forward");
                        reduce_to(g, &offs, self.value(*b).len())
                    };
                    if neg {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let offs = if av.shape() == bv.shape() {
                    None
                } else {
                    Some(broadcast_offsets(av.shape(), bv.shape()).expect("checked in forward"))
                };
                let bidx = |i: usize| offs.as_ref().map_or(i, |o| o[i]);
                if self.nodes[a.0].requires_grad {
                    let bd = bv.data();
                    let ga = g.iter().enumerate().map(|(i, &gi)| gi * bd[bidx(i)]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let ad = av.data();
                    let prod: Vec<T> = g.iter().zip(ad).map(|(&gi, &x)| gi * x).collect();
                    let gb = match &offs {
                        None => prod,
                        Some(o) => reduce_to(&prod, o, bv.len()),
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, g.to_vec());
            }
            Op::MatMul { a, b, trans_b } => self.backprop_matmul(node, g, *a, *b, *trans_b, grads),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, permute_data(g, node.value.shape(), &inv));
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis] * inner;
                    if self.nodes[x.0].requires_grad {
                        let mut gx = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gx.extend_from_slice(&g[o * total + start..o * total + start + len]);
                        }
                        self.accumulate(grads, x, gx);
                    }
                    start += len;
                }
            }
            Op::Conv2d { x, w, spec } => {
                let geo = ConvGeom::new(self.shape(*x), self.shape(*w), *spec)?;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let (ckk, p) = (geo.ckk(), geo.p());
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let chw = geo.c * geo.h * geo.w;
                let mut gw = if need_w { vec![T::zero(); wd.len()] } else { Vec::new() };
                let mut gx = if need_x { vec![T::zero(); xd.len()] } else { Vec::new() };
                let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { ckk * p }];
                let mut dcols = vec![T::zero(); if need_x && !geo.is_pointwise() { ckk * p } else { 0 }];
                for n in 0..geo.n {
                    let gn = &g[n * geo.o * p..(n + 1) * geo.o * p];
                    let xn = &xd[n * chw..(n + 1) * chw];
                    if need_w {
                        let cm: &[T] = if geo.is_pointwise() {
                            xn
                        } else {
                            geo.im2col(xn, &mut cols);
                            &cols
                        };
                        gemm(T::one(), gn, MatView::new(geo.o, p), cm, MatView::new(ckk, p).t(), T::one(), &mut gw);
                    }
                    if need_x {
                        let wt = MatView::new(geo.o, ckk).t();
                        if geo.is_pointwise() {
                            gemm(T::one(), wd, wt, gn, MatView::new(geo.o, p), T::zero(), &mut gx[n * chw..(n + 1) * chw]);
                        } else {
                            gemm(T::one(), wd, wt, gn, MatView::new(geo.o, p), T::zero(), &mut dcols);
                            geo.col2im(&dcols, &mut gx[n * chw..(n + 1) * chw]);
                        }
                    }
                }
                if need_w {
                    self.accumulate(grads, *w, gw);
                }
                if need_x {
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::NormLast { x, rstd } => {
                let d = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                let inv_d = T::from_f64(1.0 / d as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let mg = gr.iter().copied().sum::<T>() * inv_d;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for ((o, &gi), &yi) in gx[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
                        *o = rs * (gi - mg - yi * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                if d > 0 {
                    for ((yr, gr), o) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
                            *oi = yi * (gi - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let xd = self.value(*x).data();
                let gx = xd
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        gi * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &gi) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += gi;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (pi, plane) in gx.chunks_exact_mut((h * w).max(1)).enumerate().take(s[0] * s[1]) {
                    let gp = &g[pi * 4 * h * w..(pi + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            plane[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1);
                let v = g[0] / T::from_f64(n as f64);
                self.accumulate(grads, *x, vec![v; self.value(*x).len()]);
            }
        }
        Ok(())
    }

    fn backprop_matmul(&self, node: &Node<T>, g: &[T], a: Var, b: Var, trans_b: bool, grads: &mut [Option<Vec<T>>]) {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let k = *ash.last().unwrap();
        let n = *node.value.shape().last().unwrap();
        let (_, br, bc) = mat_dims(bsh);
        let bview = if trans_b { MatView::new(br, bc).t() } else { MatView::new(br, bc) };
        let need_a = self.nodes[a.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        if bsh.len() == 2 {
            let rows: usize = ash[..ash.len() - 1].iter().product();
            if need_a {
                let mut ga = vec![T::zero(); ad.len()];
                gemm(T::one(), g, MatView::new(rows, n), bd, bview.t(), T::zero(), &mut ga);
                self.accumulate(grads, a, ga);
            }
            if need_b {
                let mut gb = vec![T::zero(); bd.len()];
                if trans_b {
                    gemm(T::one(), g, MatView::new(rows, n).t(), ad, MatView::new(rows, k), T::zero(), &mut gb);
                } else {
                    gemm(T::one(), ad, MatView::new(rows, k).t(), g, MatView::new(rows, n), T::zero(), &mut gb);
                }
                self.accumulate(grads, b, gb);
            }
        } else {
            let (ab, m, _) = mat_dims(ash);
            let mut ga = if need_a { vec![T::zero(); ad.len()] } else { Vec::new() };
            let mut gb = if need_b { vec![T::zero(); bd.len()] } else { Vec::new() };
            for i in 0..ab {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * br * bc..(i + 1) * br * bc];
                if need_a {
                    gemm(T::one(), gi, MatView::new(m, n), bi, bview.t(), T::zero(), &mut ga[i * m * k..(i + 1) * m * k]);
                }
                if need_b {
                    let dst = &mut gb[i * br * bc..(i + 1) * br * bc];
                    if trans_b {
                        gemm(T::one(), gi, MatView::new(m, n).t(), ai, MatView::new(m, k), T::zero(), dst);
                    } else {
                        gemm(T::one(), ai, MatView::new(m, k).t(), gi, MatView::new(m, n), T::zero(), dst);
                    }
                }
            }
            if need_a {
                self.accumulate(grads, a, ga);
            }
            if need_b {
                self.accumulate(grads, b, gb);
            }
        }
    }
}
