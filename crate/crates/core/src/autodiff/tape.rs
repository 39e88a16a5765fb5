//! Define-by-run tape. Every op evaluates eagerly and records what it needs
//! for the reverse sweep; `backward` replays the records in reverse.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{lanes, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Exp,
    Log,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    RepeatRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, usize)>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<(u64, usize), Var>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(Error::Axis {
            axis,
            rank: shape.len(),
        })
    }
}

fn remove_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib.to_vec()),
    }
}

/// out_flat -> in_flat index map for a permutation of `in_shape`.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let moved: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&moved).map(|(i, s)| i * s).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node, keeping allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        t.zero_grad();
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter as a leaf. Binding the same parameter twice on one
    /// tape returns the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let src = store.get(id);
        let t = Tensor::new(src.shape().to_vec(), src.data().to_vec())
            .expect("parameter shape is valid")
            .requiring_grad();
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(key);
        self.bindings.insert(key, v);
        v
    }

    /// Non-differentiable copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.node(v).value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.node(v).value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value.item()
    }

    /// Accumulated gradient of a differentiable leaf (after `backward`).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    pub(crate) fn param_grads(&self, uid: u64) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.nodes.iter().filter_map(move |n| match (n.param, n.value.grad()) {
            (Some((u, idx)), Some(g)) if u == uid => Some((idx, g)),
            _ => None,
        })
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_kernel(ta.data(), tb.data(), r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched matmul of `[n, r, k] x [n, k, c] -> [n, r, c]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1] {
            return Err(Error::shape("bmm", ta.shape(), tb.shape()));
        }
        let (n, r, k, c) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = Vec::with_capacity(n * r * c);
        for i in 0..n {
            out.extend(matmul_kernel(
                &ta.data()[i * r * k..(i + 1) * r * k],
                &tb.data()[i * k * c..(i + 1) * k * c],
                r,
                k,
                c,
            ));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, r, c], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// `x · w + b` with `b` repeated across the rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw)[0];
        let bb = self.repeat_rows(b, rows)?;
        self.add(xw, bb)
    }

    // ----- elementwise ----------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, args: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match op {
            ElementwiseOp::Add => self.add(args[0], args[1]),
            ElementwiseOp::Sub => self.sub(args[0], args[1]),
            ElementwiseOp::Mul => self.mul(args[0], args[1]),
            ElementwiseOp::Relu => Ok(self.relu(args[0])),
            ElementwiseOp::Tanh => Ok(self.tanh(args[0])),
            ElementwiseOp::Exp => Ok(self.exp(args[0])),
            ElementwiseOp::Log => self.log(args[0]),
            ElementwiseOp::Scale(c) => Ok(self.scale(args[0], c)),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        let (shape, data) = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            (ta.shape().to_vec(), d)
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
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

    /// Elementwise minimum of equal-shape operands; ties route the gradient
    /// to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("minimum", &self.node(a).value, &self.node(b).value)?;
        self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.node(x).value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.data(x).iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// Clamps into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    // ----- reductions -----------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: Option<usize>) -> Result<Var> {
        match (op, axis) {
            (ReduceOp::Sum, None) => Ok(self.sum(x)),
            (ReduceOp::Mean, None) => Ok(self.mean(x)),
            (ReduceOp::Sum, Some(a)) => self.sum_axis(x, a),
            (ReduceOp::Mean, Some(a)) => self.mean_axis(x, a),
            (ReduceOp::Max, Some(a)) => self.max_axis(x, a),
            (ReduceOp::Max, None) => Err(Error::Contract("max reduction needs an axis".into())),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn axis_fold(&self, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        let (outer, n, inner) = lanes(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data()[base + i];
                }
            }
        }
        Ok((remove_axis(t.shape(), axis), out, n))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out, _) = self.axis_fold(x, axis)?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut out, n) = self.axis_fold(x, axis)?;
        out.iter_mut().for_each(|v| *v /= n as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis(x, axis), rg))
    }

    /// Max along `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        let (outer, n, inner) = lanes(t.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let k = o * inner + i;
                for j in 0..n {
                    let v = t.data()[(o * n + j) * inner + i];
                    if j == 0 || v > out[k] {
                        out[k] = v;
                        arg[k] = j;
                    }
                }
            }
        }
        let shape = remove_axis(t.shape(), axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis(x, axis, arg), rg))
    }

    // ----- softmax family -------------------------------------------------

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Result<Tensor> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        if !t.is_finite() {
            return Err(Error::NonFinite(if log { "log_softmax" } else { "softmax" }.into()));
        }
        let (outer, n, inner) = lanes(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|j| (d[at(j)] - m).exp()).sum();
                if log {
                    let lz = z.ln();
                    (0..n).for_each(|j| out[at(j)] = d[at(j)] - m - lz);
                } else {
                    (0..n).for_each(|j| out[at(j)] = (d[at(j)] - m).exp() / z);
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_values(x, axis, false)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_values(x, axis, true)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax(x, axis), rg))
    }

    // ----- normalization --------------------------------------------------

    /// Layer normalization over the last axis with per-feature `gain` and
    /// `bias` (both of shape `[features]`).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layernorm", tx.shape(), tg.shape()))?;
        if tg.shape() != [d] {
            return Err(Error::shape("layernorm", tx.shape(), tg.shape()));
        }
        if tb.shape() != [d] {
            return Err(Error::shape("layernorm", tx.shape(), tb.shape()));
        }
        let rows = tx.numel() / d;
        let mut out = vec![0.0; tx.numel()];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * rs * tg.data()[j] + tb.data()[j];
            }
            mean[r] = mu;
            rstd[r] = rs;
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    // ----- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", t.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank()
            || perm
                .iter()
                .any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", t.shape(), perm));
        }
        let (out_shape, map) = permute_map(t.shape(), perm);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(x, map), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(Error::shape("transpose", self.shape(x), &[2]));
        }
        self.permute(x, &[1, 0])
    }

    /// Tiles `x` `n` times along a new or existing leading axis: `[d] -> [n, d]`
    /// and `[r, d] -> [n * r, d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = match t.shape() {
            [d] => vec![n, *d],
            [r, d] => vec![n * r, *d],
            s => return Err(Error::shape("repeat_rows", s, &[n])),
        };
        let mut data = Vec::with_capacity(t.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::RepeatRows(x, n), rg))
    }

    /// Gathers rows of a rank-2 tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, d) = match t.shape() {
            [r, d] => (*r, *d),
            s => return Err(Error::shape("select_rows", s, &[rows.len()])),
        };
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape("select_rows", t.shape(), rows));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], data)?,
            Op::SelectRows(x, rows.to_vec()),
            rg,
        ))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let d = match self.shape(*first) {
            [_, d] => *d,
            s => return Err(Error::shape("concat_rows", s, &[])),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            match t.shape() {
                [r, dd] if *dd == d => rows += r,
                s => return Err(Error::shape("concat_rows", s, &[d])),
            }
            data.extend_from_slice(t.data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(vec![rows, d], data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Picks `x[b, idx[b]]` from a `[batch, n]` tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (b, n) = match t.shape() {
            [b, n] => (*b, *n),
            s => return Err(Error::shape("gather", s, &[idx.len()])),
        };
        if idx.len() != b || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather", t.shape(), &[idx.len()]));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| t.data()[r * n + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b], data)?, Op::Gather(x, idx.to_vec()), rg))
    }

    /// Multiplies elementwise by fixed per-element factors (a dropout mask
    /// already folded with its inverted-dropout scale).
    pub fn masked_scale(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if factors.len() != t.numel() {
            return Err(Error::shape("dropout", t.shape(), &[factors.len()]));
        }
        let data = t.data().iter().zip(&factors).map(|(v, f)| v * f).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout(x, factors), rg))
    }

    // ----- reverse sweep --------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added into the
    /// accumulators of every differentiable leaf, so repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.node(loss).value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        // Writes `contrib` into the slot for `v` if it needs a gradient.
        macro_rules! send {
            ($v:expr, $contrib:expr) => {
                if want($v) {
                    let c = $contrib;
                    add_into(&mut grads[$v.0], &c);
                }
            };
        }
        // Gradient w.r.t. one side of a broadcasting binary op.
        let fold = |v: Var, full: Vec<f64>| -> Vec<f64> {
            if self.nodes[v.0].value.numel() == full.len() {
                full
            } else {
                vec![full.iter().sum()]
            }
        };
        let bcast = |v: Var, k: usize| -> f64 {
            let d = val(v);
            if d.len() == 1 {
                d[0]
            } else {
                d[k]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                send!(*a, matmul_grad_a(g, val(*b), r, k, c));
                send!(*b, matmul_grad_b(val(*a), g, r, k, c));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (n, r, k, c) = (sa[0], sa[1], sa[2], sb[2]);
                send!(*a, {
                    let mut da = Vec::with_capacity(n * r * k);
                    for t in 0..n {
                        da.extend(matmul_grad_a(
                            &g[t * r * c..(t + 1) * r * c],
                            &val(*b)[t * k * c..(t + 1) * k * c],
                            r,
                            k,
                            c,
                        ));
                    }
                    da
                });
                send!(*b, {
                    let mut db = Vec::with_capacity(n * k * c);
                    for t in 0..n {
                        db.extend(matmul_grad_b(
                            &val(*a)[t * r * k..(t + 1) * r * k],
                            &g[t * r * c..(t + 1) * r * c],
                            r,
                            k,
                            c,
                        ));
                    }
                    db
                });
            }
            Op::Add(a, b) => {
                send!(*a, fold(*a, g.to_vec()));
                send!(*b, fold(*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                send!(*a, fold(*a, g.to_vec()));
                send!(*b, fold(*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                send!(*a, fold(*a, (0..g.len()).map(|k| g[k] * bcast(*b, k)).collect()));
                send!(*b, fold(*b, (0..g.len()).map(|k| g[k] * bcast(*a, k)).collect()));
            }
            Op::Minimum(a, b) => {
                let (da, db) = (val(*a), val(*b));
                send!(
                    *a,
                    (0..g.len())
                        .map(|k| if db[k] < da[k] { 0.0 } else { g[k] })
                        .collect::<Vec<_>>()
                );
                send!(
                    *b,
                    (0..g.len())
                        .map(|k| if db[k] < da[k] { g[k] } else { 0.0 })
                        .collect::<Vec<_>>()
                );
            }
            Op::Scale(x, c) => send!(*x, g.iter().map(|v| v * c).collect::<Vec<_>>()),
            Op::Shift(x) => send!(*x, g.to_vec()),
            Op::Square(x) => {
                send!(*x, g.iter().zip(val(*x)).map(|(g, x)| 2.0 * x * g).collect::<Vec<_>>())
            }
            Op::Relu(x) => send!(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect::<Vec<_>>()
            ),
            Op::Tanh(x) => send!(
                *x,
                g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect::<Vec<_>>()
            ),
            Op::Exp(x) => send!(*x, g.iter().zip(out).map(|(g, y)| g * y).collect::<Vec<_>>()),
            Op::Log(x) => send!(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect::<Vec<_>>()),
            Op::Clamp(x, lo, hi) => send!(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect::<Vec<_>>()
            ),
            Op::Sum(x) => send!(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send!(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = lanes(shape, *axis);
                let div = if matches!(node.op, Op::MeanAxis(..)) {
                    n as f64
                } else {
                    1.0
                };
                send!(*x, {
                    let mut dx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                dx[(o * n + j) * inner + i] = g[o * inner + i] / div;
                            }
                        }
                    }
                    dx
                });
            }
            Op::MaxAxis(x, axis, arg) => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = lanes(shape, *axis);
                send!(*x, {
                    let mut dx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = o * inner + i;
                            dx[(o * n + arg[k]) * inner + i] = g[k];
                        }
                    }
                    dx
                });
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = lanes(node.value.shape(), *axis);
                send!(*x, {
                    let mut dx = vec![0.0; out.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            if log {
                                let gs: f64 = (0..n).map(|j| g[at(j)]).sum();
                                for j in 0..n {
                                    dx[at(j)] = g[at(j)] - out[at(j)].exp() * gs;
                                }
                            } else {
                                let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                                for j in 0..n {
                                    dx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                    dx
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xd = val(*x);
                let gd = val(*gain);
                let d = gd.len();
                let rows = xd.len() / d;
                let xhat = |r: usize, j: usize| (xd[r * d + j] - mean[r]) * rstd[r];
                send!(*x, {
                    let mut dx = vec![0.0; xd.len()];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xhat(r, j);
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gd[j];
                            dx[r * d + j] = rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                        }
                    }
                    dx
                });
                send!(*gain, {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                    dg
                });
                send!(*bias, {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    db
                });
            }
            Op::Reshape(x) => send!(*x, g.to_vec()),
            Op::Permute(x, map) => send!(*x, {
                let mut dx = vec![0.0; g.len()];
                for (o, &src) in map.iter().enumerate() {
                    dx[src] = g[o];
                }
                dx
            }),
            Op::RepeatRows(x, n) => send!(*x, {
                let m = val(*x).len();
                let mut dx = vec![0.0; m];
                for t in 0..*n {
                    for k in 0..m {
                        dx[k] += g[t * m + k];
                    }
                }
                dx
            }),
            Op::SelectRows(x, rows) => send!(*x, {
                let src = &self.nodes[x.0].value;
                let d = src.shape()[1];
                let mut dx = vec![0.0; src.numel()];
                for (o, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] += g[o * d + j];
                    }
                }
                dx
            }),
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = val(x).len();
                    send!(x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Gather(x, idx) => send!(*x, {
                let n = self.nodes[x.0].value.shape()[1];
                let mut dx = vec![0.0; idx.len() * n];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * n + i] = g[r];
                }
                dx
            }),
            Op::Dropout(x, f) => send!(*x, g.iter().zip(f).map(|(g, f)| g * f).collect::<Vec<_>>()),
        }
    }
}

/// Row-major `[r, k] x [k, c]`. Each output element sums over `k` in
/// ascending order, so a row's result does not depend on the other rows.
fn matmul_kernel(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * c..(kk + 1) * c];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// dA = G · Bᵀ
fn matmul_grad_a(g: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut da = vec![0.0; r * k];
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for kk in 0..k {
            let brow = &b[kk * c..(kk + 1) * c];
            da[i * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    da
}

// dB = Aᵀ · G
fn matmul_grad_b(a: &[f64], g: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * c];
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let drow = &mut db[kk * c..(kk + 1) * c];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
    db
}
