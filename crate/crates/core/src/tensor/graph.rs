use std::collections::HashMap;

use super::kernels as k;
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, T),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice(Var, usize, usize, usize),
    Concat(Vec<Var>, usize),
    BroadcastTo(Var),
    Gather(Var, Vec<usize>),
    Select(Var, usize, Vec<usize>),
    MatMul(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Normalize(Var, Vec<T>),
    Gelu(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert tape: every op appends a node, [`Graph::backward`] replays them
/// in reverse. A graph lives on one thread and is discarded after use.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    check_finite: bool,
    fault: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: cfg!(debug_assertions),
            fault: None,
        }
    }

    /// Enables or disables the non-finite check on every op output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Debugging hook: the backward rule of every op named `op` (e.g.
    /// `"exp"`) is scaled by 1.01, so gradient checks must catch it.
    pub fn inject_gradient_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && !matches!(op, Op::Leaf) && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::InvalidShape {
                op: "constant",
                detail: format!("shape {shape:?} with {} values", value.len()),
            });
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, false).expect("leaf push"))
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(&[], vec![v]).expect("scalar")
    }

    /// Registers a named parameter once per graph; later calls with the same
    /// name return the same leaf so shared weights accumulate one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>, requires_grad: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape consistent")
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (shape, value) = k::binary(name, &na.value, &na.shape, &nb.value, &nb.shape, f)?;
        let rg = na.requires_grad || nb.requires_grad;
        self.push(shape, value, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, op, rg)
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

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::sqrt, Op::Sqrt(a))
    }

    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        self.unary(a, move |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, k::gelu, Op::Gelu(a))
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let total = n.value.iter().copied().sum();
        let rg = n.requires_grad;
        self.push(vec![], vec![total], Op::Sum(a), rg)
    }

    /// Mean of all elements, as a 0-d tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let count = self.nodes[a.0].value.len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_usize(count.max(1)).unwrap())
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.nodes[a.0].shape.len();
        if axis >= rank {
            return Err(Error::InvalidShape {
                op,
                detail: format!("axis {axis} for rank {rank}"),
            });
        }
        Ok(())
    }

    fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let n = &self.nodes[a.0];
        let value = k::sum_axis(&n.value, &n.shape, axis);
        let (shape, rg) = (Self::drop_axis(&n.shape, axis), n.requires_grad);
        self.push(shape, value, Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let n = &self.nodes[a.0];
        let len = T::from_usize(n.shape[axis].max(1)).unwrap();
        let value = k::sum_axis(&n.value, &n.shape, axis).into_iter().map(|v| v / len).collect();
        let (shape, rg) = (Self::drop_axis(&n.shape, axis), n.requires_grad);
        self.push(shape, value, Op::MeanAxis(a, axis), rg)
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", a, axis)?;
        let n = &self.nodes[a.0];
        let (value, arg) = k::max_axis(&n.value, &n.shape, axis);
        let (shape, rg) = (Self::drop_axis(&n.shape, axis), n.requires_grad);
        self.push(shape, value, Op::MaxAxis(a, arg), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if numel(shape) != n.value.len() {
            return Err(Error::shape("reshape", &n.shape, shape));
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        self.push(shape.to_vec(), value, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..n.shape.len()).collect::<Vec<_>>() {
            return Err(Error::InvalidShape {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of rank {}", n.shape.len()),
            });
        }
        let (shape, value) = k::permute(&n.value, &n.shape, perm);
        let rg = n.requires_grad;
        self.push(shape, value, Op::Permute(a, perm.to_vec()), rg)
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.nodes[a.0].shape.len();
        if d0 >= rank || d1 >= rank {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: format!("axes ({d0},{d1}) for rank {rank}"),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let n = &self.nodes[a.0];
        if start + len > n.shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("[{start}, {}) out of axis {axis} of {:?}", start + len, n.shape),
            });
        }
        let value = k::slice_axis(&n.value, &n.shape, axis, start, len);
        let mut shape = n.shape.clone();
        shape[axis] = len;
        let rg = n.requires_grad;
        self.push(shape, value, Op::Slice(a, axis, start, len), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.nodes[first.0].shape.clone();
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = k::split_at_axis(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = &self.nodes[p.0];
                let chunk = n.shape[axis] * inner;
                value.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(shape, value, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        let value = k::broadcast_to(&n.value, &n.shape, shape)?;
        let rg = n.requires_grad;
        self.push(shape.to_vec(), value, Op::BroadcastTo(a), rg)
    }

    /// Picks one element per row along the last axis: `out[r] = a[r, idx[r]]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        let cols = *n.shape.last().ok_or_else(|| Error::arg("gather on a scalar"))?;
        let rows = if cols == 0 { 0 } else { n.value.len() / cols };
        if idx.len() != rows {
            return Err(Error::InvalidShape {
                op: "gather",
                detail: format!("{} indices for {rows} rows", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::arg(format!("gather index {bad} out of range for {cols} columns")));
        }
        let value = idx.iter().enumerate().map(|(r, &c)| n.value[r * cols + c]).collect();
        let shape = n.shape[..n.shape.len() - 1].to_vec();
        let rg = n.requires_grad;
        self.push(shape, value, Op::Gather(a, idx.to_vec()), rg)
    }

    /// Selects entries along `axis` (with repetition allowed).
    pub fn select(&mut self, a: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        self.check_axis("select", a, axis)?;
        let n = &self.nodes[a.0];
        let (outer, len, inner) = k::split_at_axis(&n.shape, axis);
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::arg(format!("select index {bad} out of range for axis of {len}")));
        }
        let mut value = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * len + i) * inner;
                value.extend_from_slice(&n.value[base..base + inner]);
            }
        }
        let mut shape = n.shape.clone();
        shape[axis] = idx.len();
        let rg = n.requires_grad;
        self.push(shape, value, Op::Select(a, axis, idx.to_vec()), rg)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (shape, value) = k::matmul_forward(&na.value, &na.shape, &nb.value, &nb.shape)?;
        let rg = na.requires_grad || nb.requires_grad;
        self.push(shape, value, Op::MatMul(a, b), rg)
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        self.nodes[a.0]
            .shape
            .last()
            .copied()
            .ok_or_else(|| Error::InvalidShape {
                op,
                detail: "needs rank >= 1".into(),
            })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_dim("softmax", a)?;
        let n = &self.nodes[a.0];
        let value = k::softmax_rows(&n.value, cols);
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_dim("log_softmax", a)?;
        let n = &self.nodes[a.0];
        let value = k::log_softmax_rows(&n.value, cols);
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::LogSoftmax(a), rg)
    }

    /// Zero-mean, unit-variance normalisation over the last axis.
    pub fn normalize(&mut self, a: Var, eps: T) -> Result<Var> {
        let cols = self.last_dim("normalize", a)?;
        let n = &self.nodes[a.0];
        let (value, rstd) = k::normalize_rows(&n.value, cols, eps);
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::Normalize(a, rstd), rg)
    }

    /// Reverse pass from a scalar `loss`. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", ln.shape)));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.fault.as_deref() == Some(op_name(&self.nodes[i].op)) {
                let bump = T::lit(1.01);
                g.iter_mut().for_each(|v| *v *= bump);
            }
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = &node.shape;
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let shape_of = |v: Var| self.nodes[v.0].shape.as_slice();
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    send(*a, k::reduce_to(g, out_shape, shape_of(*a)));
                }
                if self.rg(*b) {
                    send(*b, k::reduce_to(g, out_shape, shape_of(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    send(*a, k::reduce_to(g, out_shape, shape_of(*a)));
                }
                if self.rg(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    send(*b, k::reduce_to(&neg, out_shape, shape_of(*b)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let (_, ga) = k::binary("mul", g, out_shape, val(*b), shape_of(*b), |x, y| x * y).unwrap();
                    send(*a, k::reduce_to(&ga, out_shape, shape_of(*a)));
                }
                if self.rg(*b) {
                    let (_, gb) = k::binary("mul", g, out_shape, val(*a), shape_of(*a), |x, y| x * y).unwrap();
                    send(*b, k::reduce_to(&gb, out_shape, shape_of(*b)));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let (_, ga) = k::binary("div", g, out_shape, val(*b), shape_of(*b), |x, y| x / y).unwrap();
                    send(*a, k::reduce_to(&ga, out_shape, shape_of(*a)));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let (_, q) = k::binary("div", &node.value, out_shape, val(*b), shape_of(*b), |x, y| x / y).unwrap();
                    let gb: Vec<T> = g.iter().zip(&q).map(|(&gg, &qq)| -gg * qq).collect();
                    send(*b, k::reduce_to(&gb, out_shape, shape_of(*b)));
                }
            }
            Op::Neg(a) => send(*a, g.iter().map(|&x| -x).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(&node.value).map(|(&gg, &y)| gg * y).collect()),
            Op::Log(a) => send(*a, g.iter().zip(val(*a)).map(|(&gg, &x)| gg / x).collect()),
            Op::Sqrt(a) => {
                let half = T::lit(0.5);
                send(*a, g.iter().zip(&node.value).map(|(&gg, &y)| gg * half / y).collect())
            }
            Op::Powf(a, p) => {
                let p = *p;
                send(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&gg, &x)| gg * p * x.powf(p - T::one()))
                        .collect(),
                )
            }
            Op::Gelu(a) => send(*a, g.iter().zip(val(*a)).map(|(&gg, &x)| gg * k::gelu_grad(x)).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::SumAxis(a, axis) => send(*a, k::expand_axis(g, shape_of(*a), *axis, T::one())),
            Op::MeanAxis(a, axis) => {
                let len = T::from_usize(shape_of(*a)[*axis].max(1)).unwrap();
                send(*a, k::expand_axis(g, shape_of(*a), *axis, T::one() / len))
            }
            Op::MaxAxis(a, arg) => {
                let mut ga = vec![T::zero(); val(*a).len()];
                for (&gg, &src) in g.iter().zip(arg) {
                    ga[src] += gg;
                }
                send(*a, ga)
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Permute(a, perm) => {
                let (_, ga) = k::permute(g, out_shape, &k::inverse_perm(perm));
                send(*a, ga)
            }
            Op::Slice(a, axis, start, len) => send(*a, k::unslice_axis(g, shape_of(*a), *axis, *start, *len)),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = k::split_at_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shape_of(p)[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(p, gp);
                    }
                    offset += len;
                }
            }
            Op::BroadcastTo(a) => send(*a, k::reduce_to(g, out_shape, shape_of(*a))),
            Op::Gather(a, idx) => {
                let cols = *shape_of(*a).last().unwrap();
                let mut ga = vec![T::zero(); val(*a).len()];
                for (r, (&c, &gg)) in idx.iter().zip(g).enumerate() {
                    ga[r * cols + c] += gg;
                }
                send(*a, ga)
            }
            Op::Select(a, axis, idx) => {
                let (outer, len, inner) = k::split_at_axis(shape_of(*a), *axis);
                let mut ga = vec![T::zero(); val(*a).len()];
                let m = idx.len();
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &g[(o * m + j) * inner..(o * m + j + 1) * inner];
                        let dst = &mut ga[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                send(*a, ga)
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = k::matmul_backward(
                    val(*a),
                    shape_of(*a),
                    val(*b),
                    shape_of(*b),
                    g,
                    self.rg(*a),
                    self.rg(*b),
                );
                if let Some(ga) = ga {
                    send(*a, ga);
                }
                if let Some(gb) = gb {
                    send(*b, gb);
                }
            }
            Op::Softmax(a) => {
                let cols = *out_shape.last().unwrap();
                send(*a, k::softmax_rows_backward(&node.value, g, cols))
            }
            Op::LogSoftmax(a) => {
                let cols = *out_shape.last().unwrap();
                send(*a, k::log_softmax_rows_backward(&node.value, g, cols))
            }
            Op::Normalize(a, rstd) => {
                let cols = *out_shape.last().unwrap();
                send(*a, k::normalize_rows_backward(&node.value, rstd, g, cols))
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`; zeros when
    /// `v` did not contribute to the loss.
    pub fn grad(&self, v: Var) -> Result<Tensor<T>> {
        if !self.backward_done {
            return Err(Error::Graph("gradient requested before backward".into()));
        }
        let shape = &self.nodes[v.0].shape;
        let data = match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![T::zero(); numel(shape)],
        };
        Tensor::new(shape, data)
    }

    /// Gradient of a parameter registered through [`Graph::param`].
    pub fn param_grad(&self, name: &str) -> Option<Tensor<T>> {
        let v = self.param_var(name)?;
        self.grad(v).ok()
    }
}

/// Names accepted by [`Graph::inject_gradient_fault`].
pub const OP_NAMES: &[&str] = &[
    "leaf", "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "pow", "sum", "sum_axis", "mean_axis", "max_axis", "reshape",
    "permute", "slice", "concat", "broadcast_to", "gather", "select", "matmul", "softmax", "log_softmax", "normalize", "gelu",
];

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Powf(..) => "pow",
        Op::Sum(..) => "sum",
        Op::SumAxis(..) => "sum_axis",
        Op::MeanAxis(..) => "mean_axis",
        Op::MaxAxis(..) => "max_axis",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::Slice(..) => "slice",
        Op::Concat(..) => "concat",
        Op::BroadcastTo(..) => "broadcast_to",
        Op::Gather(..) => "gather",
        Op::Select(..) => "select",
        Op::MatMul(..) => "matmul",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::Normalize(..) => "normalize",
        Op::Gelu(..) => "gelu",
    }
}
