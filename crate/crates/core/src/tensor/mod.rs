//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values live in a [`Tensor`]; computation is recorded on a [`Tape`] and
//! addressed through lightweight [`Var`] handles. Every operation copies its
//! output (there are no views), and backward replays the tape in exact reverse
//! recording order.
//!
//! Arithmetic is carried out in `f64`. Under [`Precision::Single`] (the
//! default) every recorded value is rounded to the nearest `f32`, which makes
//! results identical to correctly-rounded single-precision kernels for the
//! elementwise ops. [`Precision::Double`] keeps full `f64` and is what
//! [`grad_check`] uses.

mod conv;
mod gradcheck;
mod ops;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};

pub use conv::{conv_out_size, conv_transpose_out_size};
pub use gradcheck::{grad_check, DEFAULT_GRAD_CHECK_EPS};
pub use ops::{PoolKind, ReduceKind, UnaryOp};
pub use tape::{Tape, Var};

/// Numeric mode for tapes and parameter storage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }

    pub fn round_slice(self, values: &mut [f64]) {
        if self == Precision::Single {
            for v in values {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Stable identity of a trainable tensor; tapes key parameter leaves by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// How to fill a freshly created tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
    Data(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], init: Init) -> Result<Self> {
        if let Some(d) = shape.iter().find(|&&d| d == 0) {
            return shape_err(format!("non-positive dimension {d} in {shape:?}"));
        }
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform { lo, hi, seed } => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
            }
            Init::Normal { mean, std, seed } => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            Init::Data(data) => {
                if data.len() != n {
                    return shape_err(format!(
                        "data length {} does not match shape {shape:?} ({n} elements)",
                        data.len()
                    ));
                }
                data
            }
        };
        Ok(Tensor::raw(shape.to_vec(), data))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, Init::Data(data))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, Init::Zeros)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::raw(Vec::new(), vec![v])
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return shape_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn round(&mut self, precision: Precision) {
        precision.round_slice(&mut self.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape under trailing-dimension broadcasting.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("shapes {a:?} and {b:?} are not broadcastable")),
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index of `input` it reads under broadcasting.
pub(crate) fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if out == input {
        return (0..n).collect();
    }
    let rank = out.len();
    let offset = rank - input.len();
    let in_strides = strides(input);
    // stride 0 on stretched axes
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < offset || input[i - offset] == 1 {
                0
            } else {
                in_strides[i - offset]
            }
        })
        .collect();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}
