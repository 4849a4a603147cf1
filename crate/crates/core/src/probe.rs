//! Frozen-feature evaluation: backbone feature extraction, the `SSFX`
//! feature file, and a multinomial logistic-regression probe.
//!
//! A feature file is the 4-byte magic `SSFX`, then `N` and `d` as
//! little-endian `u32`, then `N·d` little-endian `f32` values, row-major.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::{Mode, ModuleGraph, Optimizer, OptimizerKind};
use crate::supervisors::Supervisor;
use crate::tensor::{Precision, Tape, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"SSFX";

/// Runs the frozen backbone over `data` in index order, `chunk` images at a
/// time. Returns `[N, feature_dim]`.
pub fn extract_features(sup: &Supervisor, data: &Dataset, chunk: usize) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let chunk = chunk.max(1);
    let mut rows = Vec::new();
    let mut d = 0;
    for start in (0..data.len()).step_by(chunk) {
        let images: Vec<_> = (start..(start + chunk).min(data.len())).map(|i| data.image(i).clone()).collect();
        let f = sup.features(&images)?;
        d = f.shape()[1];
        rows.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[data.len(), d], rows)
}

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    let &[n, d] = features.shape() else {
        return invalid(format!("features must be [N, d], got {:?}", features.shape()));
    };
    let (n32, d32) = match (u32::try_from(n), u32::try_from(d)) {
        (Ok(n), Ok(d)) => (n, d),
        _ => return invalid("feature matrix too large for the file format"),
    };
    let mut out = Vec::with_capacity(12 + n * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Data("not a feature file (missing SSFX header)".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != n * d * 4 {
        return Err(Error::Data(format!(
            "feature file declares {n}x{d} values but holds {} bytes of data",
            body.len()
        )));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Tensor::from_vec(&[n, d], data)
}

pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_features(features)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_features(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 200, lr: 1e-2, val_fraction: 0.2, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

/// Trains a linear softmax classifier on standardized `features` (`[N, d]`)
/// with full-batch Adam, one step per epoch, on a seeded train/val split.
///
/// ```
/// use pretext::probe::{linear_probe, ProbeConfig};
/// use pretext::tensor::Tensor;
///
/// let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
/// let data = labels.iter().flat_map(|&y| if y == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
/// let features = Tensor::from_vec(&[20, 2], data).unwrap();
/// let report = linear_probe(&features, &labels, &ProbeConfig::default()).unwrap();
/// assert_eq!(report.val_accuracy, 1.0);
/// ```
pub fn linear_probe(features: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let &[n, d] = features.shape() else {
        return invalid(format!("features must be [N, d], got {:?}", features.shape()));
    };
    if labels.len() != n {
        return Err(Error::Data(format!("{n} feature rows but {} labels", labels.len())));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) || !(cfg.lr > 0.0) {
        return Err(Error::Config("probe needs 0 < val_fraction < 1 and lr > 0".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(Error::Data("linear probe needs at least two classes".into()));
    }
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let (val_idx, train_idx) = order.split_at(n_val);

    let x = features.data();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train_idx {
        for j in 0..d {
            mean[j] += x[i * d + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    for &i in train_idx {
        for j in 0..d {
            std[j] += (x[i * d + j] - mean[j]).powi(2);
        }
    }
    for s in &mut std {
        *s = (*s / train_idx.len() as f64).sqrt();
        if *s < 1e-8 {
            *s = 1.0;
        }
    }
    let (mean, std) = (&mean, &std);
    let standardized = |idx: &[usize]| -> Result<Tensor> {
        let rows = idx.iter().flat_map(|&i| (0..d).map(move |j| (x[i * d + j] - mean[j]) / std[j])).collect();
        Tensor::from_vec(&[idx.len(), d], rows)
    };
    let x_train = standardized(train_idx)?;
    let x_val = standardized(val_idx)?;
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_val: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut model = ModuleGraph::new(Precision::Double);
    model.linear(Tensor::zeros(&[d, classes])?, Tensor::zeros(&[classes])?);
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new(Precision::Double);
        let xv = tape.constant(&x_train)?;
        let logits = model.forward(&mut tape, xv, Mode::Train)?;
        let loss = tape.cross_entropy(logits, &y_train)?;
        final_loss = tape.item(loss)?;
        tape.backward(loss)?;
        opt.step(&mut [&mut model], &tape, cfg.lr)?;
    }
    Ok(ProbeReport {
        classes,
        n_train: train_idx.len(),
        n_val,
        train_accuracy: accuracy(&model, &x_train, &y_train)?,
        val_accuracy: accuracy(&model, &x_val, &y_val)?,
        final_loss,
    })
}

fn accuracy(model: &ModuleGraph, x: &Tensor, y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new(Precision::Double);
    let xv = tape.constant(x)?;
    let logits = model.forward_eval(&mut tape, xv)?;
    let c = tape.shape(logits)[1];
    let correct = tape
        .value(logits)
        .chunks(c)
        .zip(y)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    Ok(correct as f64 / y.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}
