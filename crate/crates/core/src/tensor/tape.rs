use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, ReduceKind, UnaryOp};
use super::{conv, numel, ParamId, Precision, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(super) tape: u64,
    pub(super) idx: usize,
}

impl Var {
    /// Position of the producing node in recording order.
    pub fn tape_index(self) -> usize {
        self.idx
    }
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Unary(usize, UnaryOp),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
        k: usize,
        stride: usize,
    },
    Reduce {
        x: usize,
        kind: ReduceKind,
        map: Vec<usize>,
        count: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    L2Normalize {
        x: usize,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        ranges: Vec<Range<usize>>,
    },
    IndexSelect {
        x: usize,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        x: usize,
        targets: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Single-writer record of a forward computation.
///
/// Nodes are appended in execution order, so the tape is topologically
/// ordered by construction. [`Tape::backward`] walks it once in reverse.
pub struct Tape {
    id: u64,
    precision: Precision,
    pub(super) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::default())
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Autodiff(
                "variable does not belong to this tape".into(),
            ));
        }
        Ok(v.idx)
    }

    pub(super) fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub(super) fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        mut value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{name}");
        self.precision.round_slice(&mut value);
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var { tape: self.id, idx })
    }

    pub(super) fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Records `t` as a leaf. Gradients are kept when `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Leaf for a trainable parameter, recorded once per tape and reused on
    /// later lookups so that gradients from repeated uses accumulate.
    pub fn param(&mut self, id: ParamId, t: &Tensor, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.leaf(t, trainable)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Makes later `param(id, ..)` lookups resolve to `v`.
    pub fn bind_param(&mut self, id: ParamId, v: Var) -> Result<()> {
        self.check(v)?;
        self.params.insert(id, v);
        Ok(())
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.grads[v.idx].as_deref())
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.check(v)?;
        let (shape, value) = (self.nodes[i].shape.clone(), self.nodes[i].value.clone());
        self.push("detach", shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.idx];
        Tensor::raw(n.shape.clone(), n.value.clone())
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let i = self.check(v)?;
        match self.nodes[i].value.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Shape(format!(
                "expected a scalar, got shape {:?}",
                self.nodes[i].shape
            ))),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Clears accumulated gradients so that `backward` may run again.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].shape
            )));
        }
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call zero_grads first".into(),
            ));
        }
        self.backward_done = true;
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        self.grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (j, delta) in contributions {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut self.grads[j] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(delta) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => ops::binary_backward(nodes, node, *a, *b, g, ops::Binary::Add),
            Op::Sub(a, b) => ops::binary_backward(nodes, node, *a, *b, g, ops::Binary::Sub),
            Op::Mul(a, b) => ops::binary_backward(nodes, node, *a, *b, g, ops::Binary::Mul),
            Op::Div(a, b) => ops::binary_backward(nodes, node, *a, *b, g, ops::Binary::Div),
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::MulScalar(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Unary(x, op) => vec![(*x, ops::unary_backward(*op, &nodes[*x].value, &node.value, g))],
            Op::MatMul(a, b) => conv::matmul_backward(nodes, *a, *b, g),
            Op::Conv2d { x, w, b, stride, pad } => {
                conv::conv2d_backward(nodes, node, *x, *w, *b, *stride, *pad, g)
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                conv::conv_transpose2d_backward(nodes, node, *x, *w, *b, *stride, *pad, g)
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; nodes[*x].value.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                vec![(*x, dx)]
            }
            Op::AvgPool { x, k, stride } => {
                vec![(*x, conv::avg_pool_backward(&nodes[*x].shape, &node.shape, *k, *stride, g))]
            }
            Op::Reduce { x, kind, map, count, argmax } => {
                let dx = match kind {
                    ReduceKind::Sum => map.iter().map(|&o| g[o]).collect(),
                    ReduceKind::Mean => {
                        let s = 1.0 / *count as f64;
                        map.iter().map(|&o| g[o] * s).collect()
                    }
                    ReduceKind::Max => {
                        let mut dx = vec![0.0; map.len()];
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += g[o];
                        }
                        dx
                    }
                };
                vec![(*x, dx)]
            }
            Op::Softmax { x, axis } => vec![(*x, ops::softmax_backward(&node.shape, *axis, &node.value, g))],
            Op::LogSoftmax { x, axis } => {
                vec![(*x, ops::log_softmax_backward(&node.shape, *axis, &node.value, g))]
            }
            Op::L2Normalize { x, axis, eps, norms } => {
                vec![(*x, ops::l2_normalize_backward(&node.shape, *axis, *eps, norms, &node.value, g))]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => vec![(*x, ops::permute_backward(&nodes[*x].shape, perm, g))],
            Op::Concat { xs, axis } => ops::concat_backward(nodes, xs, *axis, &node.shape, g),
            Op::Slice { x, ranges } => vec![(*x, ops::slice_backward(&nodes[*x].shape, ranges, g))],
            Op::IndexSelect { x, indices } => {
                let row = numel(&nodes[*x].shape[1..]);
                let mut dx = vec![0.0; nodes[*x].value.len()];
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..row {
                        dx[src * row + c] += g[r * row + c];
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = nodes[*logits].shape[1];
                let scale = g[0] / targets.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &t) in targets.iter().enumerate() {
                    dx[b * k + t] -= scale;
                }
                vec![(*logits, dx)]
            }
            Op::BceWithLogits { x, targets } => {
                let scale = g[0] / targets.len() as f64;
                let dx = nodes[*x]
                    .value
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (ops::sigmoid(z) - t) * scale)
                    .collect();
                vec![(*x, dx)]
            }
        }
    }
}
