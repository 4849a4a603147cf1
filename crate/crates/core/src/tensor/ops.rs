//! Elementwise, reduction, normalization, shape and loss operations.

use std::ops::Range;

use super::tape::{Node, Op, Tape, Var};
use super::{broadcast_map, broadcast_shape, numel, strides};
use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Neg,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// (outer, axis length, inner) sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Tape {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.node(ia).shape, &self.node(ib).shape);
        let out_shape = broadcast_shape(sa, sb)?;
        let ma = broadcast_map(&out_shape, sa);
        let mb = broadcast_map(&out_shape, sb);
        let (va, vb) = (&self.node(ia).value, &self.node(ib).value);
        if kind == Binary::Div && vb.contains(&0.0) {
            return Err(Error::DivisionByZero);
        }
        let value: Vec<f64> = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| {
                let (x, y) = (va[i], vb[j]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let (name, op) = match kind {
            Binary::Add => ("add", Op::Add(ia, ib)),
            Binary::Sub => ("sub", Op::Sub(ia, ib)),
            Binary::Mul => ("mul", Op::Mul(ia, ib)),
            Binary::Div => ("div", Op::Div(ia, ib)),
        };
        let rg = self.rg(ia) || self.rg(ib);
        self.push(name, out_shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        let n = self.node(i);
        let value = n.value.iter().map(|v| v + c).collect();
        let shape = n.shape.clone();
        let rg = self.rg(i);
        self.push("add_scalar", shape, value, Op::AddScalar(i), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        let n = self.node(i);
        let value = n.value.iter().map(|v| v * c).collect();
        let shape = n.shape.clone();
        let rg = self.rg(i);
        self.push("mul_scalar", shape, value, Op::MulScalar(i, c), rg)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let n = self.node(i);
        match op {
            UnaryOp::Log if n.value.iter().any(|&v| v <= 0.0) => {
                return Err(Error::Domain("log of a non-positive value".into()))
            }
            UnaryOp::Sqrt if n.value.iter().any(|&v| v < 0.0) => {
                return Err(Error::Domain("sqrt of a negative value".into()))
            }
            _ => {}
        }
        let value = n
            .value
            .iter()
            .map(|&v| match op {
                UnaryOp::Relu => v.max(0.0),
                UnaryOp::LeakyRelu(a) => {
                    if v > 0.0 {
                        v
                    } else {
                        a * v
                    }
                }
                UnaryOp::Sigmoid => sigmoid(v),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Exp => v.exp(),
                UnaryOp::Log => v.ln(),
                UnaryOp::Neg => -v,
                UnaryOp::Sqrt => v.sqrt(),
            })
            .collect();
        let shape = n.shape.clone();
        let rg = self.rg(i);
        self.push(unary_name(op), shape, value, Op::Unary(i, op), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(UnaryOp::LeakyRelu(alpha), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    /// Sum, mean or max over `axes`. Max routes its gradient to the first
    /// (lowest flat index) maximum of each group.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        let i = self.check(x)?;
        let shape = self.node(i).shape.clone();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return shape_err(format!("axis {a} out of range for rank {rank}"));
            }
            reduced[a] = true;
        }
        let kept: Vec<usize> = (0..rank).map(|a| if reduced[a] { 1 } else { shape[a] }).collect();
        let out_n = numel(&kept);
        let count = numel(&shape).checked_div(out_n).unwrap_or(0);
        // input flat index -> output flat index
        let map = reduce_map(&shape, &kept);
        let value_in = &self.node(i).value;
        let mut value = match kind {
            ReduceKind::Max => vec![f64::NEG_INFINITY; out_n],
            _ => vec![0.0; out_n],
        };
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (src, &o) in map.iter().enumerate() {
                    value[o] += value_in[src];
                }
                if kind == ReduceKind::Mean {
                    let s = 1.0 / count as f64;
                    value.iter_mut().for_each(|v| *v *= s);
                }
            }
            ReduceKind::Max => {
                argmax = vec![usize::MAX; out_n];
                for (src, &o) in map.iter().enumerate() {
                    if argmax[o] == usize::MAX || value_in[src] > value[o] {
                        value[o] = value_in[src];
                        argmax[o] = src;
                    }
                }
            }
        }
        let out_shape = if keepdims {
            kept
        } else {
            (0..rank).filter(|&a| !reduced[a]).map(|a| shape[a]).collect()
        };
        let rg = self.rg(i);
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
        };
        self.push(name, out_shape, value, Op::Reduce { x: i, kind, map, count, argmax }, rg)
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes, keepdims)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes, keepdims)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Sum, x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Mean, x, &axes, false)
    }

    fn axis_check(&self, i: usize, axis: usize) -> Result<()> {
        let rank = self.node(i).shape.len();
        if axis >= rank {
            return shape_err(format!("axis {axis} out of range for rank {rank}"));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.check(x)?;
        self.axis_check(i, axis)?;
        let shape = self.node(i).shape.clone();
        let value = softmax_forward(&shape, axis, &self.node(i).value, false);
        let rg = self.rg(i);
        self.push("softmax", shape, value, Op::Softmax { x: i, axis }, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.check(x)?;
        self.axis_check(i, axis)?;
        let shape = self.node(i).shape.clone();
        let value = softmax_forward(&shape, axis, &self.node(i).value, true);
        let rg = self.rg(i);
        self.push("log_softmax", shape, value, Op::LogSoftmax { x: i, axis }, rg)
    }

    /// `x / max(‖x‖₂, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let i = self.check(x)?;
        self.axis_check(i, axis)?;
        let shape = self.node(i).shape.clone();
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = &self.node(i).value;
        let mut norms = vec![0.0; outer * inner];
        let mut value = vec![0.0; xv.len()];
        for o in 0..outer {
            for n in 0..inner {
                let base = o * len * inner + n;
                let ss: f64 = (0..len).map(|k| xv[base + k * inner].powi(2)).sum();
                let norm = ss.sqrt();
                norms[o * inner + n] = norm;
                let d = norm.max(eps);
                for k in 0..len {
                    value[base + k * inner] = xv[base + k * inner] / d;
                }
            }
        }
        let rg = self.rg(i);
        self.push("l2_normalize", shape, value, Op::L2Normalize { x: i, axis, eps, norms }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        if numel(shape) != self.node(i).value.len() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.node(i).shape));
        }
        let value = self.node(i).value.clone();
        let rg = self.rg(i);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(i), rg)
    }

    /// Collapses all axes after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return shape_err("cannot flatten a scalar");
        }
        let rest = numel(&shape[1..]);
        self.reshape(x, &[shape[0], rest])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let shape = self.node(i).shape.clone();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("{perm:?} is not a permutation of {} axes", shape.len()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = permute_map(&shape, perm);
        let xv = &self.node(i).value;
        let value = map.iter().map(|&src| xv[src]).collect();
        let rg = self.rg(i);
        self.push("permute", out_shape, value, Op::Permute { x: i, perm: perm.to_vec() }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return shape_err("transpose expects a rank-2 tensor");
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let idx: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = self.node(idx[0]).shape.clone();
        if axis >= first.len() {
            return shape_err(format!("axis {axis} out of range for rank {}", first.len()));
        }
        let mut total = 0;
        for &j in &idx {
            let s = &self.node(j).shape;
            let agree = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !agree {
                return shape_err(format!("concat shapes {first:?} and {s:?} disagree off axis {axis}"));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut value = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &j in &idx {
                let block = self.node(j).shape[axis] * inner;
                value.extend_from_slice(&self.node(j).value[o * block..(o + 1) * block]);
            }
        }
        let rg = idx.iter().any(|&j| self.rg(j));
        self.push("concat", out_shape, value, Op::Concat { xs: idx, axis }, rg)
    }

    /// Copies the sub-block selected by one range per axis.
    pub fn slice(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let i = self.check(x)?;
        let shape = self.node(i).shape.clone();
        if ranges.len() != shape.len() {
            return shape_err(format!("slice needs {} ranges, got {}", shape.len(), ranges.len()));
        }
        for (r, &d) in ranges.iter().zip(&shape) {
            if r.start >= r.end || r.end > d {
                return shape_err(format!("range {r:?} invalid for dimension {d}"));
            }
        }
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let map = slice_map(&shape, ranges);
        let xv = &self.node(i).value;
        let value = map.iter().map(|&src| xv[src]).collect();
        let rg = self.rg(i);
        self.push("slice", out_shape, value, Op::Slice { x: i, ranges: ranges.to_vec() }, rg)
    }

    /// Gathers rows along axis 0; repeated indices accumulate in backward.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let shape = self.node(i).shape.clone();
        if shape.is_empty() || indices.is_empty() {
            return shape_err("index_select needs a non-scalar input and at least one index");
        }
        if let Some(&bad) = indices.iter().find(|&&r| r >= shape[0]) {
            return shape_err(format!("row {bad} out of range for {} rows", shape[0]));
        }
        let row = numel(&shape[1..]);
        let xv = &self.node(i).value;
        let mut value = Vec::with_capacity(indices.len() * row);
        for &r in indices {
            value.extend_from_slice(&xv[r * row..(r + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(i);
        self.push("index_select", out_shape, value, Op::IndexSelect { x: i, indices: indices.to_vec() }, rg)
    }

    /// Mean over the batch of `-log_softmax(logits)[b, target_b]`; logits are `[B, K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let i = self.check(logits)?;
        let shape = self.node(i).shape.clone();
        if shape.len() != 2 || shape[0] != targets.len() {
            return shape_err(format!(
                "cross_entropy expects [B, K] logits for {} targets, got {shape:?}",
                targets.len()
            ));
        }
        let k = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return invalid(format!("target {t} out of range for {k} classes"));
        }
        let logp = softmax_forward(&shape, 1, &self.node(i).value, true);
        let loss = -targets.iter().enumerate().map(|(b, &t)| logp[b * k + t]).sum::<f64>() / targets.len() as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let rg = self.rg(i);
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy { logits: i, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// Mean squared error over all elements; shapes must match exactly.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return shape_err(format!(
                "mse shapes differ: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            ));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Numerically stable mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let i = self.check(logits)?;
        let xv = &self.node(i).value;
        if xv.len() != targets.len() {
            return shape_err(format!("bce: {} logits vs {} targets", xv.len(), targets.len()));
        }
        if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return invalid("bce targets must lie in [0, 1]");
        }
        let loss = xv
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(i);
        self.push(
            "bce_with_logits",
            Vec::new(),
            vec![loss],
            Op::BceWithLogits { x: i, targets: targets.to_vec() },
            rg,
        )
    }
}

fn unary_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Relu => "relu",
        UnaryOp::LeakyRelu(_) => "leaky_relu",
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Tanh => "tanh",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Neg => "neg",
        UnaryOp::Sqrt => "sqrt",
    }
}

pub(crate) fn unary_backward(op: UnaryOp, x: &[f64], y: &[f64], g: &[f64]) -> Vec<f64> {
    (0..g.len())
        .map(|k| {
            let d = match op {
                UnaryOp::Relu => {
                    if x[k] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UnaryOp::LeakyRelu(a) => {
                    if x[k] > 0.0 {
                        1.0
                    } else {
                        a
                    }
                }
                UnaryOp::Sigmoid => y[k] * (1.0 - y[k]),
                UnaryOp::Tanh => 1.0 - y[k] * y[k],
                UnaryOp::Exp => y[k],
                UnaryOp::Log => 1.0 / x[k],
                UnaryOp::Neg => -1.0,
                UnaryOp::Sqrt => 0.5 / y[k],
            };
            g[k] * d
        })
        .collect()
}

pub(crate) fn binary_backward(
    nodes: &[Node],
    out: &Node,
    a: usize,
    b: usize,
    g: &[f64],
    kind: Binary,
) -> Vec<(usize, Vec<f64>)> {
    let (na, nb) = (&nodes[a], &nodes[b]);
    let ma = broadcast_map(&out.shape, &na.shape);
    let mb = broadcast_map(&out.shape, &nb.shape);
    let mut res = Vec::with_capacity(2);
    if na.requires_grad {
        let mut da = vec![0.0; na.value.len()];
        for k in 0..g.len() {
            da[ma[k]] += match kind {
                Binary::Add | Binary::Sub => g[k],
                Binary::Mul => g[k] * nb.value[mb[k]],
                Binary::Div => g[k] / nb.value[mb[k]],
            };
        }
        res.push((a, da));
    }
    if nb.requires_grad {
        let mut db = vec![0.0; nb.value.len()];
        for k in 0..g.len() {
            db[mb[k]] += match kind {
                Binary::Add => g[k],
                Binary::Sub => -g[k],
                Binary::Mul => g[k] * na.value[ma[k]],
                Binary::Div => {
                    let d = nb.value[mb[k]];
                    -g[k] * na.value[ma[k]] / (d * d)
                }
            };
        }
        res.push((b, db));
    }
    res
}

/// Input flat index -> output flat index, where `kept` is `shape` with
/// reduced axes set to 1.
fn reduce_map(shape: &[usize], kept: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let rank = shape.len();
    let ks = strides(kept);
    let eff: Vec<usize> = (0..rank).map(|a| if kept[a] == 1 { 0 } else { ks[a] }).collect();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn softmax_forward(shape: &[usize], axis: usize, x: &[f64], log: bool) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for n in 0..inner {
            let base = o * len * inner + n;
            let at = |k: usize| base + k * inner;
            let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..len).map(|k| (x[at(k)] - m).exp()).sum();
            let lse = m + s.ln();
            for k in 0..len {
                out[at(k)] = if log { x[at(k)] - lse } else { (x[at(k)] - m).exp() / s };
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(shape: &[usize], axis: usize, y: &[f64], g: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for n in 0..inner {
            let base = o * len * inner + n;
            let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
            for k in 0..len {
                let p = base + k * inner;
                dx[p] = y[p] * (g[p] - dot);
            }
        }
    }
    dx
}

pub(crate) fn log_softmax_backward(shape: &[usize], axis: usize, y: &[f64], g: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for n in 0..inner {
            let base = o * len * inner + n;
            let gs: f64 = (0..len).map(|k| g[base + k * inner]).sum();
            for k in 0..len {
                let p = base + k * inner;
                dx[p] = g[p] - y[p].exp() * gs;
            }
        }
    }
    dx
}

pub(crate) fn l2_normalize_backward(
    shape: &[usize],
    axis: usize,
    eps: f64,
    norms: &[f64],
    y: &[f64],
    g: &[f64],
) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for n in 0..inner {
            let base = o * len * inner + n;
            let norm = norms[o * inner + n];
            if norm > eps {
                let dot: f64 = (0..len).map(|k| y[base + k * inner] * g[base + k * inner]).sum();
                for k in 0..len {
                    let p = base + k * inner;
                    dx[p] = (g[p] - y[p] * dot) / norm;
                }
            } else {
                for k in 0..len {
                    let p = base + k * inner;
                    dx[p] = g[p] / eps;
                }
            }
        }
    }
    dx
}

/// Output flat index -> input flat index for a permutation of axes.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    walk(&out_shape, &eff, 0)
}

/// Visits every multi-index of `shape` in row-major order and yields
/// `base + Σ idx·eff`.
fn walk(shape: &[usize], eff: &[usize], base: usize) -> Vec<usize> {
    let n = numel(shape);
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = base;
    for _ in 0..n {
        out.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn permute_backward(in_shape: &[usize], perm: &[usize], g: &[f64]) -> Vec<f64> {
    let map = permute_map(in_shape, perm);
    let mut dx = vec![0.0; g.len()];
    for (o, &src) in map.iter().enumerate() {
        dx[src] = g[o];
    }
    dx
}

fn slice_map(shape: &[usize], ranges: &[Range<usize>]) -> Vec<usize> {
    let st = strides(shape);
    let base: usize = ranges.iter().zip(&st).map(|(r, s)| r.start * s).sum();
    let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
    walk(&out_shape, &st, base)
}

pub(crate) fn slice_backward(in_shape: &[usize], ranges: &[Range<usize>], g: &[f64]) -> Vec<f64> {
    let map = slice_map(in_shape, ranges);
    let mut dx = vec![0.0; numel(in_shape)];
    for (o, &src) in map.iter().enumerate() {
        dx[src] += g[o];
    }
    dx
}

pub(crate) fn concat_backward(
    nodes: &[Node],
    xs: &[usize],
    axis: usize,
    out_shape: &[usize],
    g: &[f64],
) -> Vec<(usize, Vec<f64>)> {
    let (outer, _, inner) = split_axis(out_shape, axis);
    let mut grads: Vec<Vec<f64>> = xs.iter().map(|&j| Vec::with_capacity(nodes[j].value.len())).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (t, &j) in xs.iter().enumerate() {
            let block = nodes[j].shape[axis] * inner;
            grads[t].extend_from_slice(&g[pos..pos + block]);
            pos += block;
        }
    }
    xs.iter().copied().zip(grads).collect()
}
