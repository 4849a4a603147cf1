use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{conv_out_size, conv_transpose_out_size, ParamId, PoolKind, Precision, Tape, Tensor, Var};

/// Training or inference behaviour for layers that care (batch norm).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    #[default]
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

/// A named tensor owned by a graph. Buffers (running statistics) are stored
/// and checkpointed but never optimized.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    id: ParamId,
    pub value: Tensor,
    pub trainable: bool,
    buffer: bool,
}

impl Param {
    fn weight(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), id: ParamId::fresh(), value, trainable: true, buffer: false }
    }

    fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), id: ParamId::fresh(), value, trainable: false, buffer: true }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn is_buffer(&self) -> bool {
        self.buffer
    }

    fn var(&self, tape: &mut Tape) -> Result<Var> {
        tape.param(self.id, &self.value, self.trainable)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d { weight: Param, bias: Param, stride: usize, pad: usize },
    /// Weight layout `[C_in, C_out, kh, kw]`.
    ConvTranspose2d { weight: Param, bias: Param, stride: usize, pad: usize },
    /// Weight layout `[in, out]`; computes `x·W + b`.
    Linear { weight: Param, bias: Param },
    Norm(Norm),
    Act(Activation),
    Pool { kind: PoolKind, k: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Unflatten { c: usize, h: usize, w: usize },
    /// Fixed `scale·x + shift`.
    Affine { scale: f64, shift: f64 },
    /// Runs each branch on a channel slice of the input and concatenates
    /// the branch outputs along axis 1.
    Parallel { branches: Vec<(Range<usize>, ModuleGraph)> },
}

/// An ordered stack of layers with uniquely named parameters.
#[derive(Clone, Debug)]
pub struct ModuleGraph {
    layers: Vec<Layer>,
    feature_dim: usize,
    precision: Precision,
}

/// Pending running-stat update; `path` alternates layer and branch indices.
struct StatUpdate {
    path: Vec<usize>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl ModuleGraph {
    /// Starts an empty graph that will round its parameters to `precision`.
    pub fn new(precision: Precision) -> Self {
        ModuleGraph { layers: Vec::new(), feature_dim: 0, precision }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn set_feature_dim(&mut self, d: usize) {
        self.feature_dim = d;
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        let idx = self.layers.len();
        let mut layer = layer;
        rename(&mut layer, &idx.to_string());
        let mut fresh = Vec::new();
        collect_mut(std::slice::from_mut(&mut layer), &mut fresh);
        for p in fresh {
            p.value.round(self.precision);
        }
        self.layers.push(layer);
        self
    }

    pub fn conv2d(&mut self, weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> &mut Self {
        self.push(Layer::Conv2d { weight: Param::weight("weight", weight), bias: Param::weight("bias", bias), stride, pad })
    }

    pub fn conv_transpose2d(&mut self, weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> &mut Self {
        self.push(Layer::ConvTranspose2d {
            weight: Param::weight("weight", weight),
            bias: Param::weight("bias", bias),
            stride,
            pad,
        })
    }

    pub fn linear(&mut self, weight: Tensor, bias: Tensor) -> &mut Self {
        self.push(Layer::Linear { weight: Param::weight("weight", weight), bias: Param::weight("bias", bias) })
    }

    /// Normalization with `γ = 1`, `β = 0`, momentum 0.1 and eps 1e-5.
    pub fn norm(&mut self, kind: NormKind, channels: usize) -> &mut Self {
        let ones = Tensor::new(&[channels], crate::tensor::Init::Ones).expect("channels > 0");
        let zeros = Tensor::new(&[channels], crate::tensor::Init::Zeros).expect("channels > 0");
        self.push(Layer::Norm(Norm {
            kind,
            gamma: Param::weight("gamma", ones.clone()),
            beta: Param::weight("beta", zeros.clone()),
            running_mean: Param::buffer("running_mean", zeros),
            running_var: Param::buffer("running_var", ones),
            momentum: 0.1,
            eps: 1e-5,
        }))
    }

    pub fn act(&mut self, a: Activation) -> &mut Self {
        self.push(Layer::Act(a))
    }

    /// Adds a layer that feeds channel range `r_i` of its input to branch `i`
    /// and concatenates the branch features.
    pub fn parallel(&mut self, branches: Vec<(Range<usize>, ModuleGraph)>) -> &mut Self {
        self.push(Layer::Parallel { branches })
    }

    /// Every parameter and buffer, in layer order.
    pub fn entries(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for_each_param(&self.layers, &mut |p| out.push(p));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        collect_mut(&mut self.layers, &mut out);
        out
    }

    /// Optimizable parameters (buffers excluded).
    pub fn parameters(&self) -> Vec<&Param> {
        self.entries().into_iter().filter(|p| !p.buffer).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries().into_iter().find(|p| p.name == name)
    }

    pub fn set_trainable(&mut self, on: bool) {
        for p in self.entries_mut() {
            if !p.buffer {
                p.trainable = on;
            }
        }
    }

    /// Structural copy with fresh parameter ids, so the copy is tracked
    /// separately on tapes and in optimizers.
    pub fn duplicate(&self) -> Self {
        let mut g = self.clone();
        for p in g.entries_mut() {
            p.id = ParamId::fresh();
        }
        g
    }

    /// Output shape for a given input shape, without computing anything.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for layer in &self.layers {
            s = layer_shape(layer, &s)?;
        }
        Ok(s)
    }

    /// Records the forward pass on `tape`. In train mode batch norm uses batch
    /// statistics and updates its running estimates.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let mut updates = Vec::new();
        let y = self.run(tape, x, mode, &mut updates)?;
        self.apply_stat_updates(updates);
        Ok(y)
    }

    /// Inference-mode forward pass that leaves the graph untouched.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.run(tape, x, Mode::Eval, &mut Vec::new())
    }

    fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            self.apply_stat_update(&u.path, &u.mean, &u.var);
        }
    }

    fn apply_stat_update(&mut self, path: &[usize], mean: &[f64], var: &[f64]) {
        let precision = self.precision;
        match (&mut self.layers[path[0]], path.len()) {
            (Layer::Norm(n), 1) => {
                let m = n.momentum;
                for (r, v) in n.running_mean.value.data_mut().iter_mut().zip(mean) {
                    *r = precision.round((1.0 - m) * *r + m * v);
                }
                for (r, v) in n.running_var.value.data_mut().iter_mut().zip(var) {
                    *r = precision.round((1.0 - m) * *r + m * v);
                }
            }
            (Layer::Parallel { branches }, _) => branches[path[1]].1.apply_stat_update(&path[2..], mean, var),
            _ => unreachable!("stat update path does not match graph"),
        }
    }

    fn run(&self, tape: &mut Tape, x: Var, mode: Mode, updates: &mut Vec<StatUpdate>) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv2d { weight, bias, stride, pad } => {
                    let (w, b) = (weight.var(tape)?, bias.var(tape)?);
                    tape.conv2d(h, w, Some(b), *stride, *pad)?
                }
                Layer::ConvTranspose2d { weight, bias, stride, pad } => {
                    let (w, b) = (weight.var(tape)?, bias.var(tape)?);
                    tape.conv_transpose2d(h, w, Some(b), *stride, *pad)?
                }
                Layer::Linear { weight, bias } => {
                    if tape.shape(h).len() != 2 {
                        return shape_err(format!("linear layer expects [N, in], got {:?}", tape.shape(h)));
                    }
                    let (w, b) = (weight.var(tape)?, bias.var(tape)?);
                    let y = tape.matmul(h, w)?;
                    tape.add(y, b)?
                }
                Layer::Norm(n) => {
                    let (y, stats) = norm_forward(tape, h, n, mode)?;
                    if let Some((mean, var)) = stats {
                        updates.push(StatUpdate { path: vec![i], mean, var });
                    }
                    y
                }
                Layer::Act(a) => match *a {
                    Activation::Relu => tape.relu(h)?,
                    Activation::LeakyRelu(alpha) => tape.leaky_relu(h, alpha)?,
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Sigmoid => tape.sigmoid(h)?,
                },
                Layer::Pool { kind, k, stride } => tape.pool2d(*kind, h, *k, *stride)?,
                Layer::GlobalAvgPool => {
                    if tape.shape(h).len() != 4 {
                        return shape_err("global average pool expects [N, C, H, W]");
                    }
                    tape.mean(h, &[2, 3], false)?
                }
                Layer::Flatten => tape.flatten(h)?,
                Layer::Unflatten { c, h: hh, w } => {
                    let n = tape.shape(h)[0];
                    tape.reshape(h, &[n, *c, *hh, *w])?
                }
                Layer::Affine { scale, shift } => {
                    let y = tape.mul_scalar(h, *scale)?;
                    tape.add_scalar(y, *shift)?
                }
                Layer::Parallel { branches } => {
                    let shape = tape.shape(h).to_vec();
                    let mut outs = Vec::with_capacity(branches.len());
                    for (b, (range, g)) in branches.iter().enumerate() {
                        let mut ranges: Vec<Range<usize>> = shape.iter().map(|&d| 0..d).collect();
                        ranges[1] = range.clone();
                        let part = tape.slice(h, &ranges)?;
                        let mut inner = Vec::new();
                        outs.push(g.run(tape, part, mode, &mut inner)?);
                        for mut u in inner {
                            u.path.splice(0..0, [i, b]);
                            updates.push(u);
                        }
                    }
                    tape.concat(&outs, 1)?
                }
            };
        }
        Ok(h)
    }
}

fn norm_axes(kind: NormKind, rank: usize) -> Vec<usize> {
    match kind {
        NormKind::Batch => (0..rank).filter(|&a| a != 1).collect(),
        NormKind::Layer => (1..rank).collect(),
    }
}

type Stats = Option<(Vec<f64>, Vec<f64>)>;

fn norm_forward(tape: &mut Tape, x: Var, n: &Norm, mode: Mode) -> Result<(Var, Stats)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 || shape[1] != n.gamma.value.numel() {
        return shape_err(format!("norm over {} channels got input {shape:?}", n.gamma.value.numel()));
    }
    let c = shape[1];
    let mut bshape = vec![1; shape.len()];
    bshape[1] = c;
    let axes = norm_axes(n.kind, shape.len());
    let mut stats = None;
    let (xc, den) = if n.kind == NormKind::Batch && mode == Mode::Eval {
        let rm = Tensor::from_vec(&bshape, n.running_mean.value.data().to_vec())?;
        let sd: Vec<f64> = n.running_var.value.data().iter().map(|v| (v + n.eps).sqrt()).collect();
        let sd = Tensor::from_vec(&bshape, sd)?;
        let (rm, sd) = (tape.constant(&rm)?, tape.constant(&sd)?);
        (tape.sub(x, rm)?, sd)
    } else {
        if n.kind == NormKind::Batch && shape[0] < 2 {
            return invalid("batch norm needs at least 2 samples in train mode");
        }
        let mu = tape.mean(x, &axes, true)?;
        let xc = tape.sub(x, mu)?;
        let sq = tape.mul(xc, xc)?;
        let var = tape.mean(sq, &axes, true)?;
        if n.kind == NormKind::Batch {
            stats = Some((tape.value(mu).to_vec(), tape.value(var).to_vec()));
        }
        let ve = tape.add_scalar(var, n.eps)?;
        (xc, tape.sqrt(ve)?)
    };
    let xh = tape.div(xc, den)?;
    let g = n.gamma.var(tape)?;
    let b = n.beta.var(tape)?;
    let g = tape.reshape(g, &bshape)?;
    let b = tape.reshape(b, &bshape)?;
    let y = tape.mul(xh, g)?;
    Ok((tape.add(y, b)?, stats))
}

fn layer_shape(layer: &Layer, s: &[usize]) -> Result<Vec<usize>> {
    let need4 = |what: &str| -> Result<()> {
        if s.len() == 4 {
            Ok(())
        } else {
            shape_err(format!("{what} expects [N, C, H, W], got {s:?}"))
        }
    };
    Ok(match layer {
        Layer::Conv2d { weight, stride, pad, .. } => {
            need4("conv2d")?;
            let ws = weight.value.shape();
            if ws[1] != s[1] {
                return shape_err(format!("conv2d expects {} channels, got {}", ws[1], s[1]));
            }
            let oh = conv_out_size(s[2], ws[2], *stride, *pad).ok_or_else(|| Error::Shape("kernel too large".into()))?;
            let ow = conv_out_size(s[3], ws[3], *stride, *pad).ok_or_else(|| Error::Shape("kernel too large".into()))?;
            vec![s[0], ws[0], oh, ow]
        }
        Layer::ConvTranspose2d { weight, stride, pad, .. } => {
            need4("conv_transpose2d")?;
            let ws = weight.value.shape();
            if ws[0] != s[1] {
                return shape_err(format!("conv_transpose2d expects {} channels, got {}", ws[0], s[1]));
            }
            let oh = conv_transpose_out_size(s[2], ws[2], *stride, *pad)
                .ok_or_else(|| Error::Shape("empty transposed output".into()))?;
            let ow = conv_transpose_out_size(s[3], ws[3], *stride, *pad)
                .ok_or_else(|| Error::Shape("empty transposed output".into()))?;
            vec![s[0], ws[1], oh, ow]
        }
        Layer::Linear { weight, .. } => {
            let ws = weight.value.shape();
            if s.len() != 2 || s[1] != ws[0] {
                return shape_err(format!("linear expects [N, {}], got {s:?}", ws[0]));
            }
            vec![s[0], ws[1]]
        }
        Layer::Norm(_) | Layer::Act(_) | Layer::Affine { .. } => s.to_vec(),
        Layer::Pool { k, stride, .. } => {
            need4("pool")?;
            if s[2] < *k || s[3] < *k {
                return shape_err("pool window larger than input");
            }
            vec![s[0], s[1], (s[2] - k) / stride + 1, (s[3] - k) / stride + 1]
        }
        Layer::GlobalAvgPool => {
            need4("global average pool")?;
            vec![s[0], s[1]]
        }
        Layer::Flatten => vec![s[0], s[1..].iter().product()],
        Layer::Unflatten { c, h, w } => {
            if s.iter().skip(1).product::<usize>() != c * h * w {
                return shape_err(format!("cannot unflatten {s:?} into [{c}, {h}, {w}]"));
            }
            vec![s[0], *c, *h, *w]
        }
        Layer::Parallel { branches } => {
            let mut width = 0;
            for (range, g) in branches {
                let mut part = s.to_vec();
                part[1] = range.len();
                let out = g.output_shape(&part)?;
                width += out[1];
            }
            vec![s[0], width]
        }
    })
}

fn rename(layer: &mut Layer, prefix: &str) {
    match layer {
        Layer::Parallel { branches } => {
            for (b, (_, g)) in branches.iter_mut().enumerate() {
                for p in g.entries_mut() {
                    p.name = format!("{prefix}.{b}.{}", p.name);
                }
            }
        }
        other => {
            let mut ps = Vec::new();
            collect_mut(std::slice::from_mut(other), &mut ps);
            for p in ps {
                p.name = format!("{prefix}.{}", p.name);
            }
        }
    }
}

fn for_each_param<'a>(layers: &'a [Layer], f: &mut impl FnMut(&'a Param)) {
    for layer in layers {
        match layer {
            Layer::Conv2d { weight, bias, .. } | Layer::ConvTranspose2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                f(weight);
                f(bias);
            }
            Layer::Norm(n) => {
                f(&n.gamma);
                f(&n.beta);
                f(&n.running_mean);
                f(&n.running_var);
            }
            Layer::Parallel { branches } => {
                for (_, g) in branches {
                    for_each_param(&g.layers, f);
                }
            }
            _ => {}
        }
    }
}

fn collect_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Param>) {
    for layer in layers {
        match layer {
            Layer::Conv2d { weight, bias, .. } | Layer::ConvTranspose2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            Layer::Norm(n) => {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
                out.push(&mut n.running_mean);
                out.push(&mut n.running_var);
            }
            Layer::Parallel { branches } => {
                for (_, g) in branches {
                    collect_mut(&mut g.layers, out);
                }
            }
            _ => {}
        }
    }
}

/// `predictor ∘ backbone`.
#[derive(Clone, Debug)]
pub struct CombinedNet {
    pub backbone: ModuleGraph,
    pub predictor: ModuleGraph,
}

impl CombinedNet {
    pub fn new(backbone: ModuleGraph, predictor: ModuleGraph) -> Result<Self> {
        let head_in = predictor.layers.iter().find_map(|l| match l {
            Layer::Linear { weight, .. } => Some(weight.value.shape()[0]),
            _ => None,
        });
        if let Some(w) = head_in {
            if w != backbone.feature_dim {
                return shape_err(format!("head expects width {w}, backbone gives {}", backbone.feature_dim));
            }
        }
        Ok(CombinedNet { backbone, predictor })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let f = self.backbone.forward(tape, x, mode)?;
        self.predictor.forward(tape, f, mode)
    }

    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = self.backbone.forward_eval(tape, x)?;
        self.predictor.forward_eval(tape, f)
    }
}

/// Composes a backbone with a head; the backbone is moved, not copied.
pub fn attach_head(backbone: ModuleGraph, head: ModuleGraph) -> Result<CombinedNet> {
    CombinedNet::new(backbone, head)
}
