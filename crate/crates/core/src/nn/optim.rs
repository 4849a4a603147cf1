use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::ModuleGraph;
use crate::error::{invalid, Error, Result};
use crate::tensor::{ParamId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9, weight_decay: 0.0 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer with per-parameter moment buffers keyed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, t: 0, moments: BTreeMap::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of completed steps.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter of `graphs`, reading
    /// gradients from `tape`.
    pub fn step(&mut self, graphs: &mut [&mut ModuleGraph], tape: &Tape, lr: f64) -> Result<()> {
        // Validate first so a missing gradient leaves every parameter intact.
        for g in graphs.iter() {
            for p in g.parameters() {
                if p.trainable && tape.param_grad(p.id()).is_none() {
                    return Err(Error::Autodiff(format!("missing gradient for parameter {}", p.name)));
                }
            }
        }
        self.t += 1;
        for g in graphs.iter_mut() {
            let precision = g.precision();
            for p in g.entries_mut() {
                if p.is_buffer() || !p.trainable {
                    continue;
                }
                let grad = tape.param_grad(p.id()).expect("checked above");
                let id = p.id();
                self.update(id, p.value.data_mut(), grad, lr)?;
                precision.round_slice(p.value.data_mut());
            }
        }
        Ok(())
    }

    /// Updates one raw parameter buffer. Does not advance the step counter.
    pub fn update(&mut self, id: ParamId, p: &mut [f64], g: &[f64], lr: f64) -> Result<()> {
        if p.len() != g.len() {
            return invalid(format!("parameter has {} values, gradient {}", p.len(), g.len()));
        }
        let t = self.t.max(1);
        let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
        match self.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                for i in 0..p.len() {
                    m[i] = momentum * m[i] + g[i] + weight_decay * p[i];
                    p[i] -= lr * m[i];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    p[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Advances the step counter for callers driving [`Optimizer::update`]
    /// directly.
    pub fn tick(&mut self) {
        self.t += 1;
    }
}

/// `lr(e) = base_lr · gamma^floor(e / step_size)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LRSchedule {
    pub base_lr: f64,
    pub step_size: u64,
    pub gamma: f64,
}

impl LRSchedule {
    pub fn step(base_lr: f64, step_size: u64, gamma: f64) -> Self {
        LRSchedule { base_lr, step_size, gamma }
    }

    pub fn lr(&self, epoch: u64) -> f64 {
        let k = epoch / self.step_size.max(1);
        self.base_lr * self.gamma.powi(k as i32)
    }
}

/// `θ' ← m·θ' + (1 − m)·θ` over every parameter and buffer.
pub fn ema_update(target: &mut ModuleGraph, online: &ModuleGraph, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return invalid(format!("EMA momentum {m} outside [0, 1]"));
    }
    let src = online.entries();
    let precision = target.precision();
    let dst = target.entries_mut();
    if src.len() != dst.len() {
        return invalid("EMA target and online graphs differ in structure");
    }
    for (d, s) in dst.iter().zip(&src) {
        if d.name != s.name || d.value.shape() != s.value.shape() {
            return invalid(format!("EMA structure mismatch at {} / {}", d.name, s.name));
        }
    }
    for (d, s) in dst.into_iter().zip(src) {
        for (a, b) in d.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = precision.round(m * *a + (1.0 - m) * b);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp_head_with, FinalActivation};
    use crate::tensor::Precision;

    #[test]
    fn sgd_plain_step() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0, weight_decay: 0.0 });
        let mut p = [1.0];
        opt.update(ParamId::fresh(), &mut p, &[2.0], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut opt = Optimizer::new(OptimizerKind::sgd());
        let mut p = [0.3, -1.2];
        opt.update(ParamId::fresh(), &mut p, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(p, [0.3, -1.2]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::adam());
        opt.tick();
        let mut p = [0.0; 3];
        opt.update(ParamId::fresh(), &mut p, &[1.0; 3], 0.01).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        for v in p {
            assert!((v + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn one_step_decreases_quadratic() {
        for kind in [OptimizerKind::sgd(), OptimizerKind::adam()] {
            let mut opt = Optimizer::new(kind);
            opt.tick();
            let mut p = vec![0.5, -2.0, 1.5];
            let before: f64 = p.iter().map(|v| v * v).sum();
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.update(ParamId::fresh(), &mut p, &g, 1e-3).unwrap();
            let after: f64 = p.iter().map(|v| v * v).sum();
            assert!(after < before);
        }
    }

    #[test]
    fn schedule() {
        let s = LRSchedule::step(1e-3, 100, 1.0);
        assert!((0..500).all(|e| s.lr(e) == 1e-3));
        let s = LRSchedule::step(1.0, 2, 0.5);
        assert_eq!(s.lr(3), 0.5);
        assert_eq!(s.lr(0), 1.0);
    }

    #[test]
    fn ema_limits() {
        let online = build_mlp_head_with(&[3, 2], FinalActivation::None, 1, Precision::Double).unwrap();
        let mut target = build_mlp_head_with(&[3, 2], FinalActivation::None, 2, Precision::Double).unwrap();
        let before: Vec<f64> = target.entries().iter().flat_map(|p| p.value.data().to_vec()).collect();
        ema_update(&mut target, &online, 1.0).unwrap();
        let same: Vec<f64> = target.entries().iter().flat_map(|p| p.value.data().to_vec()).collect();
        assert_eq!(before, same);
        ema_update(&mut target, &online, 0.0).unwrap();
        for (a, b) in target.entries().iter().zip(online.entries()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        let other = build_mlp_head_with(&[3, 4], FinalActivation::None, 1, Precision::Double).unwrap();
        assert!(ema_update(&mut target, &other, 0.5).is_err());
    }
}
