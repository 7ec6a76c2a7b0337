//! Append-only operation tape with reverse-mode differentiation.
//!
//! Every op pushes one node whose inputs carry smaller ids, so a single
//! reverse sweep visits each node once in topological order. Parameters enter
//! the tape through [`Tape::param`], which caches one leaf per [`ParamId`];
//! gradients from every use site of a shared parameter accumulate on that leaf.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, ConvGeom};
use super::{broadcast_shape, ParamId, ParamStore, Runs, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Square,
    Negate,
    Clamp(f64, f64),
    /// `x·scale + shift`
    Affine(f64, f64),
}

impl UnaryOp {
    pub fn name(&self) -> &'static str {
        match self {
            UnaryOp::Relu => "relu",
            UnaryOp::LeakyRelu(_) => "leaky_relu",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Square => "square",
            UnaryOp::Negate => "negate",
            UnaryOp::Clamp(..) => "clamp",
            UnaryOp::Affine(..) => "affine",
        }
    }

    fn forward<T: Scalar>(&self, xs: &[T]) -> Vec<T> {
        fn map<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> Vec<T> {
            xs.iter().map(|&x| f(x)).collect()
        }
        match *self {
            UnaryOp::Relu => map(xs, |x| x.max(T::zero())),
            UnaryOp::LeakyRelu(s) => {
                let s = T::lit(s);
                map(xs, |x| if x > T::zero() { x } else { x * s })
            }
            UnaryOp::Tanh => map(xs, |x| x.tanh()),
            UnaryOp::Sigmoid => map(xs, |x| T::one() / (T::one() + (-x).exp())),
            UnaryOp::Exp => map(xs, |x| x.exp()),
            UnaryOp::Log => map(xs, |x| x.ln()),
            UnaryOp::Sqrt => map(xs, |x| x.sqrt()),
            UnaryOp::Square => map(xs, |x| x * x),
            UnaryOp::Negate => map(xs, |x| -x),
            UnaryOp::Clamp(lo, hi) => {
                let (lo, hi) = (T::lit(lo), T::lit(hi));
                map(xs, |x| x.max(lo).min(hi))
            }
            UnaryOp::Affine(scale, shift) => {
                let (a, b) = (T::lit(scale), T::lit(shift));
                map(xs, |x| x * a + b)
            }
        }
    }

    /// Upstream gradient `g` times the derivative, given input `xs` and output `ys`.
    fn backward<T: Scalar>(&self, g: &[T], xs: &[T], ys: &[T]) -> Vec<T> {
        fn zip3<T: Scalar>(g: &[T], xs: &[T], ys: &[T], f: impl Fn(T, T, T) -> T) -> Vec<T> {
            g.iter().zip(xs).zip(ys).map(|((&g, &x), &y)| f(g, x, y)).collect()
        }
        let zero = T::zero();
        match *self {
            UnaryOp::Relu => zip3(g, xs, ys, |g, x, _| if x > zero { g } else { zero }),
            UnaryOp::LeakyRelu(s) => {
                let s = T::lit(s);
                zip3(g, xs, ys, |g, x, _| if x > zero { g } else { g * s })
            }
            UnaryOp::Tanh => zip3(g, xs, ys, |g, _, y| g * (T::one() - y * y)),
            UnaryOp::Sigmoid => zip3(g, xs, ys, |g, _, y| g * y * (T::one() - y)),
            UnaryOp::Exp => zip3(g, xs, ys, |g, _, y| g * y),
            UnaryOp::Log => zip3(g, xs, ys, |g, x, _| g / x),
            UnaryOp::Sqrt => zip3(g, xs, ys, |g, _, y| g * T::lit(0.5) / y),
            UnaryOp::Square => zip3(g, xs, ys, |g, x, _| g * T::lit(2.0) * x),
            UnaryOp::Negate => g.iter().map(|&g| -g).collect(),
            UnaryOp::Clamp(lo, hi) => {
                let (lo, hi) = (T::lit(lo), T::lit(hi));
                zip3(g, xs, ys, |g, x, _| if x >= lo && x <= hi { g } else { zero })
            }
            UnaryOp::Affine(scale, _) => {
                let a = T::lit(scale);
                g.iter().map(|&g| g * a).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn name(&self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(&self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population variance (divides by the element count).
    Var,
}

impl ReduceOp {
    pub fn name(&self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Var => "var",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Unary { x: Var, op: UnaryOp },
    Binary { a: Var, b: Var, op: BinaryOp },
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Reduce { x: Var, op: ReduceOp },
    Reshape { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Unary { op, .. } => op.name(),
            Op::Binary { op, .. } => op.name(),
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Reduce { op, .. } => op.name(),
            Op::Reshape { .. } => "reshape",
            Op::Narrow { .. } => "narrow",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, Var>,
    overrides: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    fault: Option<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            overrides: HashMap::new(),
            frozen: HashSet::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters read through [`Tape::param`] after this call enter as constants.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    /// Routes reads of `id` to an existing node (used to differentiate w.r.t. one parameter).
    pub fn override_param(&mut self, id: ParamId, var: Var) {
        self.overrides.insert(id, var);
    }

    /// Test hook: scales the backward rule of every op named `op` by 1.5.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf (gradient reported by [`Gradients::wrt`]).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input; also serves as a stop-gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.overrides.get(&id) {
            return v;
        }
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let trainable = !self.frozen.contains(&id);
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.param_leaves.insert(id, v);
        v
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn unary(&mut self, x: Var, op: UnaryOp) -> Result<Var> {
        let input = &self.nodes[x.0].value;
        match op {
            UnaryOp::Log => {
                if let Some(i) = input.data().iter().position(|&v| !(v > T::zero())) {
                    let value = input.data()[i].to_f64().unwrap_or(f64::NAN);
                    return Err(Error::Domain { op: "log", index: i, value });
                }
            }
            UnaryOp::Sqrt => {
                if let Some(i) = input.data().iter().position(|&v| v < T::zero() || v.is_nan()) {
                    let value = input.data()[i].to_f64().unwrap_or(f64::NAN);
                    return Err(Error::Domain { op: "sqrt", index: i, value });
                }
            }
            UnaryOp::Clamp(lo, hi) if !(lo <= hi) => {
                return Err(Error::Config(format!("clamp bounds reversed: [{lo}, {hi}]")));
            }
            _ => {}
        }
        let out = Tensor::from_parts(input.shape().to_vec(), op.forward(input.data()));
        let ng = self.needs(x);
        Ok(self.push(out, Op::Unary { x, op }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, UnaryOp::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Square)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Negate)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Clamp(lo, hi))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Affine(scale, shift))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| op.apply(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::shape(format!("cannot broadcast {:?} with {:?} in {}", ta.shape(), tb.shape(), op.name()))
            })?;
            let runs = Runs::new(&shape, [ta.shape(), tb.shape()]);
            let mut data = vec![T::zero(); shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            match op {
                BinaryOp::Add => zip_runs(&runs, da, db, &mut data, |x, y| x + y),
                BinaryOp::Sub => zip_runs(&runs, da, db, &mut data, |x, y| x - y),
                BinaryOp::Mul => zip_runs(&runs, da, db, &mut data, |x, y| x * y),
                BinaryOp::Div => zip_runs(&runs, da, db, &mut data, |x, y| x / y),
            }
            Tensor::from_parts(shape, data)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Binary { a, b, op }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(m, k, n, ta.data(), tb.data(), &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, ng))
    }

    /// Cross-correlation with zero padding. `x: [N,C,H,W]`, `w: [F,C,kh,kw]`, `b: [F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || tb.shape() != [sw[0]] {
            return Err(Error::shape(format!(
                "conv2d input {sx:?}, kernel {sw:?}, bias {:?}",
                tb.shape()
            )));
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad).ok_or_else(|| {
            Error::shape(format!("conv2d kernel {sw:?} larger than padded input {sx:?} (pad {pad}, stride {stride})"))
        })?;
        let filters = sw[0];
        let out = kernels::conv2d_forward(tx.data(), sx[0], &geom, tw.data(), tb.data(), filters);
        let shape = vec![sx[0], filters, geom.out_h, geom.out_w];
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`] in its input).
    /// `x: [N,C,H,W]`, `w: [C,F,kh,kw]`, `b: [F]`; output side `(H−1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || tb.shape() != [sw[1]] || stride == 0 {
            return Err(Error::shape(format!(
                "conv_transpose2d input {sx:?}, kernel {sw:?}, bias {:?}, stride {stride}",
                tb.shape()
            )));
        }
        let filters = sw[1];
        let full_h = (sx[2] - 1) * stride + sw[2];
        let full_w = (sx[3] - 1) * stride + sw[3];
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape(format!("conv_transpose2d padding {pad} consumes the output of {sx:?}")));
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        let geom = ConvGeom::new(filters, oh, ow, sw[2], sw[3], stride, pad)
            .filter(|g| g.out_h == sx[2] && g.out_w == sx[3])
            .ok_or_else(|| Error::shape(format!("conv_transpose2d geometry invalid for {sx:?}, {sw:?}")))?;
        let out = kernels::conv_t_forward(tx.data(), sx[0], sx[1], &geom, tw.data(), tb.data());
        let shape = vec![sx[0], filters, oh, ow];
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConvTranspose2d { x, w, b, geom }, ng))
    }

    // ── shape & reduction ──────────────────────────────────────────────

    /// Reduces over `axes`, keeping them as size-1 dimensions.
    pub fn reduce(&mut self, x: Var, axes: &[usize], op: ReduceOp) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::Axis(format!("axis {a} out of range for rank {rank}")));
            }
            if seen[a] {
                return Err(Error::Axis(format!("duplicate axis {a}")));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = tx.shape().iter().enumerate().map(|(i, &d)| if seen[i] { 1 } else { d }).collect();
        let runs = Runs::new(tx.shape(), [&out_shape[..]]);
        let out_n: usize = out_shape.iter().product();
        let count = T::lit((tx.numel() / out_n) as f64);
        let acc = reduce_runs(&runs, tx.data(), out_n, |v, _| v, &[]);
        let out = match op {
            ReduceOp::Sum => acc,
            ReduceOp::Mean => acc.into_iter().map(|s| s / count).collect(),
            ReduceOp::Var => {
                let mean: Vec<T> = acc.into_iter().map(|s| s / count).collect();
                let sq = reduce_runs(&runs, tx.data(), out_n, |v, m| (v - m) * (v - m), &mean);
                sq.into_iter().map(|s| s / count).collect()
            }
        };
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Reduce { x, op }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        let r = self.reduce(x, &axes, ReduceOp::Sum)?;
        self.reshape(r, &[1])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        let r = self.reduce(x, &axes, ReduceOp::Mean)?;
        self.reshape(r, &[1])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.reshape(shape.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!("narrow axis {axis} [{start}, {}) of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Narrow { x, axis, start }, ng))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[id] = Some(g);
                continue;
            }
            let scale = match &self.fault {
                Some(f) if f == node.op.name() => Some(T::lit(1.5)),
                _ => None,
            };
            let emit = |grads: &mut Vec<Option<Vec<T>>>, v: Var, mut contrib: Vec<T>| {
                if let Some(s) = scale {
                    contrib.iter_mut().for_each(|c| *c *= s);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::Unary { x, op } => {
                    let xv = self.nodes[x.0].value.data();
                    let yv = node.value.data();
                    let d = op.backward(&g, xv, yv);
                    emit(&mut grads, *x, d);
                }
                Op::Binary { a, b, op } => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let out_shape = node.value.shape();
                    let runs = Runs::new(out_shape, [ta.shape(), tb.shape()]);
                    let (da, db) = (ta.data(), tb.data());
                    if self.needs(*a) {
                        let mut ga = vec![T::zero(); da.len()];
                        match op {
                            BinaryOp::Add | BinaryOp::Sub => grad_runs(&runs, &g, da, db, &mut ga, 0, |g, _, _| g),
                            BinaryOp::Mul => grad_runs(&runs, &g, da, db, &mut ga, 0, |g, _, y| g * y),
                            BinaryOp::Div => grad_runs(&runs, &g, da, db, &mut ga, 0, |g, _, y| g / y),
                        }
                        emit(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); db.len()];
                        match op {
                            BinaryOp::Add => grad_runs(&runs, &g, da, db, &mut gb, 1, |g, _, _| g),
                            BinaryOp::Sub => grad_runs(&runs, &g, da, db, &mut gb, 1, |g, _, _| -g),
                            BinaryOp::Mul => grad_runs(&runs, &g, da, db, &mut gb, 1, |g, x, _| g * x),
                            BinaryOp::Div => grad_runs(&runs, &g, da, db, &mut gb, 1, |g, x, y| -g * x / (y * y)),
                        }
                        emit(&mut grads, *b, gb);
                    }
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.needs(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        kernels::matmul_bt_into(m, n, k, &g, tb.data(), &mut ga, false);
                        emit(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        kernels::matmul_at_into(k, m, n, ta.data(), &g, &mut gb, false);
                        emit(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (dx, dw, db) =
                        kernels::conv2d_backward(tx.data(), tx.shape()[0], geom, tw.data(), tw.shape()[0], &g, self.needs(*x));
                    if let Some(dx) = dx {
                        emit(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        emit(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        emit(&mut grads, *b, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (dx, dw, db) =
                        kernels::conv_t_backward(tx.data(), tx.shape()[0], tx.shape()[1], geom, tw.data(), &g, self.needs(*x));
                    if let Some(dx) = dx {
                        emit(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        emit(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        emit(&mut grads, *b, db);
                    }
                }
                Op::Reduce { x, op, .. } => {
                    let tx = &self.nodes[x.0].value;
                    let runs = Runs::new(tx.shape(), [node.value.shape()]);
                    let out_n = node.value.numel();
                    let count = T::lit((tx.numel() / out_n) as f64);
                    let dx = match op {
                        ReduceOp::Sum => spread_runs(&runs, tx.data(), &g, &[], |g, _, _| g),
                        ReduceOp::Mean => spread_runs(&runs, tx.data(), &g, &[], |g, _, _| g / count),
                        ReduceOp::Var => {
                            let mut mean = reduce_runs(&runs, tx.data(), out_n, |v, _| v, &[]);
                            mean.iter_mut().for_each(|m| *m /= count);
                            let scale = T::lit(2.0) / count;
                            spread_runs(&runs, tx.data(), &g, &mean, |g, v, m| g * scale * (v - m))
                        }
                    };
                    emit(&mut grads, *x, dx);
                }
                Op::Reshape { x } => emit(&mut grads, *x, g),
                Op::Narrow { x, axis, start } => {
                    let shape = self.nodes[x.0].value.shape();
                    let len = node.value.shape()[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    emit(&mut grads, *x, dx);
                }
            }
        }

        let mut params = HashMap::new();
        for (&pid, &v) in &self.param_leaves {
            if let Some(g) = &grads[v.0] {
                params.insert(pid, Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()));
            }
        }
        for (&pid, &v) in &self.overrides {
            if let Some(g) = &grads[v.0] {
                params.insert(pid, Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()));
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { nodes: grads, shapes, params })
    }
}

fn zip_runs<T: Scalar>(runs: &Runs<2>, da: &[T], db: &[T], out: &mut [T], f: impl Fn(T, T) -> T) {
    let n = runs.inner();
    let (sa, sb) = (runs.inner_stride(0), runs.inner_stride(1));
    runs.for_each(|o, [ia, ib]| {
        let out = &mut out[o..o + n];
        match (sa, sb) {
            (0, 0) => out.fill(f(da[ia], db[ib])),
            (_, 0) => {
                let y = db[ib];
                out.iter_mut().zip(&da[ia..ia + n]).for_each(|(z, &x)| *z = f(x, y));
            }
            (0, _) => {
                let x = da[ia];
                out.iter_mut().zip(&db[ib..ib + n]).for_each(|(z, &y)| *z = f(x, y));
            }
            _ => out.iter_mut().zip(&da[ia..ia + n]).zip(&db[ib..ib + n]).for_each(|((z, &x), &y)| *z = f(x, y)),
        }
    });
}

/// Accumulates `f(g, a, b)` into the gradient of operand `which`.
fn grad_runs<T: Scalar>(
    runs: &Runs<2>,
    g: &[T],
    da: &[T],
    db: &[T],
    dst: &mut [T],
    which: usize,
    f: impl Fn(T, T, T) -> T,
) {
    let n = runs.inner();
    let (sa, sb) = (runs.inner_stride(0), runs.inner_stride(1));
    let sd = if which == 0 { sa } else { sb };
    if sa == 1 && sb == 1 {
        runs.for_each(|o, [ia, ib]| {
            let d = if which == 0 { ia } else { ib };
            let items = g[o..o + n].iter().zip(&da[ia..ia + n]).zip(&db[ib..ib + n]);
            dst[d..d + n].iter_mut().zip(items).for_each(|(t, ((&g, &x), &y))| *t += f(g, x, y));
        });
        return;
    }
    runs.for_each(|o, [ia, ib]| {
        let d = if which == 0 { ia } else { ib };
        let g = &g[o..o + n];
        if sd == 0 {
            let mut acc = T::zero();
            for (j, &gj) in g.iter().enumerate() {
                acc += f(gj, da[ia + sa * j], db[ib + sb * j]);
            }
            dst[d] += acc;
        } else {
            for (j, &gj) in g.iter().enumerate() {
                dst[d + j] += f(gj, da[ia + sa * j], db[ib + sb * j]);
            }
        }
    });
}

/// Sums `f(x, aux[o])` of `x` into the reduced layout; `aux` may be empty.
fn reduce_runs<T: Scalar>(runs: &Runs<1>, x: &[T], out_n: usize, f: impl Fn(T, T) -> T, aux: &[T]) -> Vec<T> {
    let n = runs.inner();
    let so = runs.inner_stride(0);
    let mut acc = vec![T::zero(); out_n];
    let at = |o: usize| aux.get(o).copied().unwrap_or(T::zero());
    runs.for_each(|i, [o]| {
        let xs = &x[i..i + n];
        if so == 0 {
            let m = at(o);
            acc[o] += xs.iter().fold(T::zero(), |s, &v| s + f(v, m));
        } else {
            for (j, &v) in xs.iter().enumerate() {
                acc[o + j] += f(v, at(o + j));
            }
        }
    });
    acc
}

/// Broadcasts the reduced gradient back over `x`: `dx = f(g[o], x, aux[o])`.
fn spread_runs<T: Scalar>(runs: &Runs<1>, x: &[T], g: &[T], aux: &[T], f: impl Fn(T, T, T) -> T) -> Vec<T> {
    let n = runs.inner();
    let so = runs.inner_stride(0);
    let mut dx = vec![T::zero(); x.len()];
    let at = |o: usize| aux.get(o).copied().unwrap_or(T::zero());
    runs.for_each(|i, [o]| {
        let (xs, ds) = (&x[i..i + n], &mut dx[i..i + n]);
        if so == 0 {
            let (gv, m) = (g[o], at(o));
            ds.iter_mut().zip(xs).for_each(|(d, &v)| *d = f(gv, v, m));
        } else {
            for (j, (d, &v)) in ds.iter_mut().zip(xs).enumerate() {
                *d = f(g[o + j], v, at(o + j));
            }
        }
    });
    dx
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient reaching a leaf node, if any path connected it to the loss.
    /// Intermediate gradients are released during the sweep.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }
}
