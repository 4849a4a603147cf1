//! Supervisor fixtures shared by the supervisor suite and the acceptance gate.

use std::time::Instant;

use pretext::data::{synth_dataset, Batch, Dataset, SyntheticSpec};
use pretext::nn::{BackboneConfig, ModuleGraph};
use pretext::supervisors::{DataInfo, Supervisor, TaskConfig, TaskKind, TrainConfig, TrainReport};
use pretext::tensor::{grad_check, Precision, Tape};
use pretext::Result;

pub fn synth(n: usize, size: usize, seed: u64) -> Dataset {
    synth_dataset(&SyntheticSpec::new(n, size, seed)).unwrap()
}

pub fn first_batch(ds: &Dataset, n: usize) -> Batch {
    let indices: Vec<usize> = (0..n).collect();
    Batch { images: indices.iter().map(|&i| ds.image(i).clone()).collect(), indices }
}

/// Smallest networks every task accepts on 8 px images.
pub fn tiny_config(kind: TaskKind) -> TaskConfig {
    let mut t = TaskConfig::new(kind);
    t.backbone = BackboneConfig { widths: vec![4], feature_dim: 6, ..Default::default() };
    t.embed_dim = 5;
    t.z_dim = 4;
    t.negatives = 3;
    t.permutations = 4;
    t.queue_size = 8;
    t
}

pub fn tiny_supervisor(kind: TaskKind, ds: &Dataset) -> Supervisor {
    Supervisor::new(kind, DataInfo::of(ds), tiny_config(kind), 0).unwrap()
}

/// Graphs whose parameters receive gradient from the task loss.
pub fn loss_graphs(sup: &Supervisor) -> Vec<String> {
    sup.graphs()
        .into_iter()
        .filter(|(name, g)| !name.starts_with("disc") && g.entries().iter().any(|p| p.trainable))
        .map(|(name, _)| name)
        .collect()
}

/// Worst relative error of the end-to-end task-loss gradient with respect
/// to the first weight tensor of every graph in [`loss_graphs`], on a
/// double-precision tape with inputs drawn once. MoC first takes one
/// warm-up step so its queue holds negatives.
///
/// Central differences that straddle a ReLU or max-pool kink disagree with
/// the analytic one-sided gradient; the fixture seeds are fixed and keep
/// every probed element away from kinks.
pub fn task_grad_error(kind: TaskKind) -> Result<f64> {
    let ds = synth(4, 8, 3);
    let mut sup = tiny_supervisor(kind, &ds);
    if kind == TaskKind::Moc {
        let warm = sup.prepare(&first_batch(&ds, 4))?;
        let (_, effects) = sup.loss(&mut Tape::new(Precision::Double), &warm)?;
        sup.apply_effects(effects)?;
    }
    let prepared = sup.prepare(&first_batch(&ds, 4))?;
    let mut worst: f64 = 0.0;
    for name in loss_graphs(&sup) {
        let graph: &ModuleGraph = sup.graph(&name).unwrap();
        let param = graph.entries().into_iter().find(|p| p.trainable).unwrap();
        let (id, value) = (param.id(), param.value.clone());
        let err = grad_check(
            |tape: &mut Tape, leaf| {
                let mut s = sup.clone();
                tape.bind_param(id, leaf)?;
                Ok(s.loss(tape, &prepared)?.0.loss)
            },
            &value,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// A training loss evaluated on a double-precision tape, for sanity checks.
pub fn double_loss(sup: &mut Supervisor, batch: &Batch) -> Result<f64> {
    let prepared = sup.prepare(batch)?;
    let mut tape = Tape::new(Precision::Double);
    let (l, _) = sup.loss(&mut tape, &prepared)?;
    Ok(l.value)
}

pub struct SmokeOutcome {
    pub report: TrainReport,
    pub secs: f64,
    pub round_trip_exact: bool,
}

/// Trains `kind` on `n` synthetic 32 px images with batch 16 and seed 0,
/// then reloads the checkpoint and compares every parameter bit for bit.
pub fn smoke_run(kind: TaskKind, n: usize, epochs: usize, dir: &std::path::Path) -> Result<SmokeOutcome> {
    let ds = synth(n, 32, 0);
    let mut sup = Supervisor::for_dataset(kind, &ds, 0)?;
    let cfg = TrainConfig { epochs, batch_size: 16, name: dir.join(kind.name()), ..Default::default() };
    let started = Instant::now();
    let report = sup.supervise(&ds, &cfg)?;
    let secs = started.elapsed().as_secs_f64();
    let loaded = pretext::supervisors::load_supervisor(kind, &cfg.name)?;
    Ok(SmokeOutcome { report, secs, round_trip_exact: same_parameters(&sup, &loaded) })
}

pub fn same_parameters(a: &Supervisor, b: &Supervisor) -> bool {
    let (ga, gb) = (a.graphs(), b.graphs());
    ga.len() == gb.len()
        && ga.iter().zip(&gb).all(|((na, x), (nb, y))| {
            let (px, py) = (x.entries(), y.entries());
            na == nb
                && px.len() == py.len()
                && px.iter().zip(&py).all(|(p, q)| {
                    p.value.shape() == q.value.shape()
                        && p.value.data().iter().zip(q.value.data()).all(|(u, v)| u.to_bits() == v.to_bits())
                })
        })
}
