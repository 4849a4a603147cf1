//! Pretext-task supervisors behind one five-phase training lifecycle.
//!
//! A [`Supervisor`] bundles the networks of one task with its configuration
//! and task state (memory banks, queues, permutation tables). [`supervise`]
//! drives any [`Lifecycle`] implementation through the phases
//! `load_pretrained → init_data_optimizer → epochs(forward, update)` and
//! stores a checkpoint when the loop ends, whether it finished or was
//! cancelled.

mod nets;
mod tasks;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::contrastive::{MemoryBank, NegativeQueue};
use crate::data::{batches, for_each_batch, Batch, Dataset};
use crate::error::{Error, Result};
use crate::imaging::{AugSpec, Image, PermutationTable};
use crate::nn::{BackboneConfig, Checkpoint, LRSchedule, ModuleGraph, Optimizer, OptimizerKind};
use crate::tensor::{Precision, Tape, Tensor, Var};

use nets::Nets;
pub use tasks::{cpc_pairs, rotation_accuracy, Effects, Prepared};

/// The thirteen pretext tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    RotateNet,
    ExemplarNet,
    Jigsaw,
    Denoise,
    Context,
    SplitBrain,
    BiGan,
    Id,
    Cpc,
    Moc,
    Cmc,
    Byol,
    Pirl,
}

impl TaskKind {
    pub const ALL: [TaskKind; 13] = [
        TaskKind::RotateNet,
        TaskKind::ExemplarNet,
        TaskKind::Jigsaw,
        TaskKind::Denoise,
        TaskKind::Context,
        TaskKind::SplitBrain,
        TaskKind::BiGan,
        TaskKind::Id,
        TaskKind::Cpc,
        TaskKind::Moc,
        TaskKind::Cmc,
        TaskKind::Byol,
        TaskKind::Pirl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::RotateNet => "rotatenet",
            TaskKind::ExemplarNet => "exemplarnet",
            TaskKind::Jigsaw => "jigsaw",
            TaskKind::Denoise => "denoise",
            TaskKind::Context => "context",
            TaskKind::SplitBrain => "splitbrain",
            TaskKind::BiGan => "bigan",
            TaskKind::Id => "id",
            TaskKind::Cpc => "cpc",
            TaskKind::Moc => "moc",
            TaskKind::Cmc => "cmc",
            TaskKind::Byol => "byol",
            TaskKind::Pirl => "pirl",
        }
    }

    /// Tasks with a discriminator trained by its own optimizer.
    pub fn is_adversarial(self) -> bool {
        matches!(self, TaskKind::Context | TaskKind::BiGan)
    }

    /// Tasks whose state is keyed by dataset index.
    pub fn uses_indices(self) -> bool {
        matches!(self, TaskKind::ExemplarNet | TaskKind::Id | TaskKind::Cmc | TaskKind::Pirl)
    }

    fn needs_color(self) -> bool {
        matches!(self, TaskKind::SplitBrain | TaskKind::Cmc)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL.into_iter().find(|k| k.name() == s.to_ascii_lowercase()).ok_or_else(|| {
            let names: Vec<&str> = TaskKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown task {s:?}; valid tasks: {}", names.join(", ")))
        })
    }
}

/// Per-task hyperparameters. Fields that a task does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub backbone: BackboneConfig,
    /// Augmentation recipe; `None` means the CPC suite at the data resolution.
    pub augment: Option<AugSpec>,
    /// Width of contrastive embeddings.
    pub embed_dim: usize,
    pub temperature: f64,
    /// Negatives per query (capped by what the bank or batch can supply).
    pub negatives: usize,
    /// EMA momentum of target encoders.
    pub momentum: f64,
    pub queue_size: usize,
    pub bank_momentum: f64,
    pub exemplar_cap: usize,
    /// Use small crops instead of whole-image views as exemplar inputs.
    pub exemplar_patch_mode: bool,
    pub permutations: usize,
    pub jigsaw_grid: usize,
    pub noise_sigma: f64,
    pub adv_weight: f64,
    pub erase_count: (usize, usize),
    /// Area fraction range of each erased rectangle.
    pub erase_area: (f64, f64),
    pub z_dim: usize,
    pub cpc_grid: usize,
    pub cpc_offsets: usize,
    pub pirl_lambda: f64,
    pub byol_symmetric: bool,
}

impl TaskConfig {
    pub fn new(kind: TaskKind) -> Self {
        TaskConfig {
            backbone: BackboneConfig::default(),
            augment: None,
            embed_dim: 64,
            temperature: match kind {
                TaskKind::Moc | TaskKind::Cmc | TaskKind::Pirl => 0.07,
                _ => 0.1,
            },
            negatives: if kind == TaskKind::Cpc { 16 } else { 128 },
            momentum: if kind == TaskKind::Byol { 0.996 } else { 0.999 },
            queue_size: 1024,
            bank_momentum: 0.5,
            exemplar_cap: 10_000,
            exemplar_patch_mode: false,
            permutations: 24,
            jigsaw_grid: 3,
            noise_sigma: 0.1,
            adv_weight: 0.001,
            erase_count: (1, 3),
            erase_area: (0.03, 0.1),
            z_dim: 64,
            cpc_grid: 4,
            cpc_offsets: 2,
            pirl_lambda: 0.5,
            byol_symmetric: true,
        }
    }

    pub fn validate(&self, kind: TaskKind) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.z_dim == 0 {
            return bad("embedding widths must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, v) in [("momentum", self.momentum), ("bank_momentum", self.bank_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("adv_weight", self.adv_weight), ("pirl_lambda", self.pirl_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        match kind {
            TaskKind::Moc if self.queue_size == 0 => bad("queue_size must be positive".into()),
            TaskKind::Jigsaw | TaskKind::Pirl if self.permutations == 0 => bad("need at least one permutation".into()),
            TaskKind::Jigsaw if self.jigsaw_grid == 0 => bad("jigsaw_grid must be positive".into()),
            TaskKind::Cpc if self.cpc_grid < 2 || self.cpc_offsets == 0 || self.cpc_offsets >= self.cpc_grid => {
                bad(format!("cpc needs grid ≥ 2 and 1 ≤ offsets < grid, got {} and {}", self.cpc_grid, self.cpc_offsets))
            }
            TaskKind::Context if self.erase_count.1 == 0 || self.erase_area.1 <= 0.0 => {
                bad("context erasing needs at least one non-empty rectangle".into())
            }
            _ => Ok(()),
        }
    }

    fn augment_for(&self, resolution: usize) -> AugSpec {
        self.augment.clone().unwrap_or_else(|| AugSpec::cpc(resolution))
    }
}

/// Learning-rate decay applied per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub step_size: u64,
    pub gamma: f64,
}

impl Default for StepLr {
    fn default() -> Self {
        StepLr { step_size: 100, gamma: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub num_workers: usize,
    /// Checkpoint path.
    pub name: PathBuf,
    pub pretrained: bool,
    pub lr_schedule: StepLr,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            epochs: 10,
            batch_size: 32,
            shuffle: true,
            num_workers: 0,
            name: PathBuf::from("store/base"),
            pretrained: false,
            lr_schedule: StepLr::default(),
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.name.as_os_str().is_empty() {
            return Err(Error::Config("checkpoint name must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Mean of every loss component over the epoch's steps.
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: TaskKind,
    pub epochs: Vec<EpochStats>,
    /// Tracked loss of every step in order (the generator side for GANs).
    pub step_losses: Vec<f64>,
    pub skipped_batches: usize,
    pub wall_time_secs: f64,
    pub epochs_completed: usize,
    pub interrupted: bool,
}

impl TrainReport {
    fn new(task: TaskKind) -> Self {
        TrainReport {
            task,
            epochs: Vec::new(),
            step_losses: Vec::new(),
            skipped_batches: 0,
            wall_time_secs: 0.0,
            epochs_completed: 0,
            interrupted: false,
        }
    }

    /// Means of the first and last `window` step losses.
    pub fn trailing_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.step_losses.len();
        if window == 0 || n < window {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.step_losses[..window]), mean(&self.step_losses[n - window..])))
    }
}

/// Cooperative cancellation flag, checked between batches.
#[derive(Clone, Debug, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Loss of one step. `components` always contains `"loss"`.
#[derive(Clone, Debug)]
pub struct StepLoss {
    pub loss: Var,
    pub value: f64,
    pub components: Vec<(&'static str, f64)>,
}

/// Mutable training objects created by `init_data_optimizer`.
#[derive(Debug)]
pub struct TrainState {
    pub optimizer: Optimizer,
    pub schedule: LRSchedule,
    pub lr: f64,
    pub step: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub num_workers: usize,
    pub verbose: bool,
    pub cancel: CancelToken,
    pub report: TrainReport,
}

/// Geometry of the data a supervisor was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataInfo {
    pub len: usize,
    pub resolution: usize,
    pub channels: usize,
}

impl DataInfo {
    pub fn of(data: &Dataset) -> Self {
        DataInfo { len: data.len(), resolution: data.resolution(), channels: data.channels() }
    }
}

#[derive(Clone, Debug, Default)]
struct TaskState {
    perms: Option<PermutationTable>,
    bank: Option<MemoryBank>,
    bank_ab: Option<MemoryBank>,
    queue: Option<NegativeQueue>,
    disc_opt: Option<Optimizer>,
    lr: f64,
}

/// One pretext task with its networks and state.
#[derive(Clone, Debug)]
pub struct Supervisor {
    kind: TaskKind,
    task: TaskConfig,
    info: DataInfo,
    seed: u64,
    nets: Nets,
    state: TaskState,
    rng: ChaCha8Rng,
}

/// The five overridable phases. Implementors only provide `supervisor`;
/// a host program overrides whichever phases it wants to change.
pub trait Lifecycle {
    fn supervisor(&mut self) -> &mut Supervisor;

    /// Restores weights from `name` when `pretrained` is set.
    fn load_pretrained(&mut self, name: &Path, pretrained: bool) -> Result<()> {
        self.supervisor().load_pretrained(name, pretrained)
    }

    fn init_data_optimizer(&mut self, cfg: &TrainConfig, cancel: &CancelToken) -> Result<TrainState> {
        self.supervisor().init_data_optimizer(cfg, cancel)
    }

    /// Loops over epochs and batches calling `forward` then `update`.
    fn epochs(&mut self, data: &Dataset, state: &mut TrainState) -> Result<()> {
        run_epochs(self, data, state)
    }

    fn forward(&mut self, tape: &mut Tape, batch: &Batch) -> Result<StepLoss> {
        self.supervisor().forward(tape, batch)
    }

    /// Backward pass, optimizer step and learning-rate step.
    fn update(&mut self, tape: &mut Tape, loss: &StepLoss, state: &mut TrainState) -> Result<()> {
        self.supervisor().update(tape, loss, state)
    }
}

impl Lifecycle for Supervisor {
    fn supervisor(&mut self) -> &mut Supervisor {
        self
    }
}

/// The default `epochs` phase, usable from overriding implementations.
pub fn run_epochs<L: Lifecycle + ?Sized>(l: &mut L, data: &Dataset, state: &mut TrainState) -> Result<()> {
    let seed = l.supervisor().seed;
    let min_batch = l.supervisor().min_batch();
    for epoch in 0..state.epochs {
        if state.cancel.is_cancelled() {
            break;
        }
        let plan = batches(data.len(), state.batch_size, state.shuffle, seed, epoch as u64);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut steps = 0usize;
        let mut skipped = 0usize;
        let lr_at_start = state.lr;
        let cancel = state.cancel.clone();
        for_each_batch(data, &plan, state.num_workers, |batch| {
            if cancel.is_cancelled() {
                return Ok(false);
            }
            if batch.len() < min_batch {
                skipped += 1;
                if state.verbose {
                    eprintln!("warning: skipping a batch of {} (task needs {min_batch})", batch.len());
                }
                return Ok(true);
            }
            let mut tape = Tape::new(Precision::Single);
            let loss = l.forward(&mut tape, &batch)?;
            l.update(&mut tape, &loss, state)?;
            for (name, v) in &loss.components {
                *sums.entry(name.to_string()).or_default() += v;
            }
            state.report.step_losses.push(loss.value);
            steps += 1;
            Ok(true)
        })?;
        state.report.skipped_batches += skipped;
        if cancel.is_cancelled() {
            break;
        }
        let losses: BTreeMap<String, f64> = sums.into_iter().map(|(k, v)| (k, v / steps.max(1) as f64)).collect();
        if state.verbose {
            let parts: Vec<String> = losses.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
            eprintln!("epoch {}/{}: {}", epoch + 1, state.epochs, parts.join(", "));
        }
        state.report.epochs.push(EpochStats { epoch, steps, lr: lr_at_start, losses });
        state.report.epochs_completed += 1;
    }
    state.report.interrupted = state.cancel.is_cancelled() && state.report.epochs_completed < state.epochs;
    Ok(())
}

/// Runs the five phases and stores a checkpoint at `cfg.name` once the
/// epoch loop has been entered, including when it was cancelled or failed.
pub fn supervise<L: Lifecycle + ?Sized>(
    l: &mut L,
    data: &Dataset,
    cfg: &TrainConfig,
    cancel: &CancelToken,
) -> Result<TrainReport> {
    cfg.validate()?;
    l.supervisor().check_data(data)?;
    let started = Instant::now();
    l.load_pretrained(&cfg.name, cfg.pretrained)?;
    let mut state = l.init_data_optimizer(cfg, cancel)?;
    let outcome = l.epochs(data, &mut state);
    state.report.wall_time_secs = started.elapsed().as_secs_f64();
    let saved = l.supervisor().save(&cfg.name, Some(cfg));
    outcome?;
    saved?;
    Ok(state.report)
}

impl Supervisor {
    /// Builds fresh networks for data with the given geometry.
    pub fn new(kind: TaskKind, info: DataInfo, task: TaskConfig, seed: u64) -> Result<Self> {
        task.validate(kind)?;
        if info.len == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        if kind.needs_color() && info.channels != 3 {
            return Err(Error::Config(format!("{kind} needs 3-channel images, got {}", info.channels)));
        }
        if kind == TaskKind::ExemplarNet && info.len > task.exemplar_cap {
            return Err(Error::Config(format!(
                "exemplarnet supports at most {} images, dataset has {}",
                task.exemplar_cap, info.len
            )));
        }
        let nets = Nets::build(kind, &task, info, seed)?;
        let mut state = TaskState::default();
        match kind {
            TaskKind::Jigsaw => {
                state.perms = Some(crate::imaging::build_permutation_set(
                    task.jigsaw_grid * task.jigsaw_grid,
                    task.permutations,
                    0,
                )?)
            }
            TaskKind::Pirl => state.perms = Some(crate::imaging::build_permutation_set(9, task.permutations, 0)?),
            _ => {}
        }
        if matches!(kind, TaskKind::Id | TaskKind::Cmc | TaskKind::Pirl) {
            state.bank = Some(MemoryBank::new(info.len, task.embed_dim, task.bank_momentum, seed ^ 0xBA4C)?);
        }
        if kind == TaskKind::Cmc {
            state.bank_ab = Some(MemoryBank::new(info.len, task.embed_dim, task.bank_momentum, seed ^ 0xAB)?);
        }
        if kind == TaskKind::Moc {
            state.queue = Some(NegativeQueue::new(task.queue_size));
        }
        Ok(Supervisor { kind, task, info, seed, nets, state, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Default configuration for `kind`, sized to `data`.
    pub fn for_dataset(kind: TaskKind, data: &Dataset, seed: u64) -> Result<Self> {
        Self::new(kind, DataInfo::of(data), TaskConfig::new(kind), seed)
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn task_config(&self) -> &TaskConfig {
        &self.task
    }

    pub fn data_info(&self) -> DataInfo {
        self.info
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn permutation_table(&self) -> Option<&PermutationTable> {
        self.state.perms.as_ref()
    }

    pub fn memory_bank(&self) -> Option<&MemoryBank> {
        self.state.bank.as_ref()
    }

    /// The second (ab) bank of CMC.
    pub fn memory_bank_ab(&self) -> Option<&MemoryBank> {
        self.state.bank_ab.as_ref()
    }

    pub fn queue(&self) -> Option<&NegativeQueue> {
        self.state.queue.as_ref()
    }

    /// Named networks, in checkpoint order.
    pub fn graphs(&self) -> Vec<(String, &ModuleGraph)> {
        self.nets.graphs()
    }

    pub fn graph(&self, name: &str) -> Option<&ModuleGraph> {
        self.nets.graphs().into_iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn graph_mut(&mut self, name: &str) -> Option<&mut ModuleGraph> {
        self.nets.graphs_mut().into_iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    /// Networks updated by the main optimizer.
    pub fn trainable_graphs(&mut self) -> Vec<&mut ModuleGraph> {
        self.nets.trainable()
    }

    /// The network whose features are the transfer artifact. For Splitbrain
    /// this is a wrapper running the L and ab halves side by side.
    pub fn get_backbone(&self) -> Result<ModuleGraph> {
        self.nets.backbone()
    }

    /// Converts images into the input expected by [`Supervisor::get_backbone`]:
    /// plain `[B, C, H, W]` pixels, scaled Lab for Splitbrain and the scaled
    /// L channel for CMC.
    pub fn backbone_input(&self, images: &[Image]) -> Result<Tensor> {
        match self.kind {
            TaskKind::SplitBrain => tasks::lab_tensor(images, &[0, 1, 2]),
            TaskKind::Cmc => tasks::lab_tensor(images, &[0]),
            _ => crate::imaging::images_to_tensor(images),
        }
    }

    /// Frozen backbone features of `images`, `[B, feature_dim]`.
    pub fn features(&self, images: &[Image]) -> Result<Tensor> {
        let backbone = self.get_backbone()?;
        let mut tape = Tape::new(Precision::Single);
        let x = tape.constant(&self.backbone_input(images)?)?;
        let f = backbone.forward_eval(&mut tape, x)?;
        Ok(tape.tensor(f))
    }

    /// Smallest batch a training step accepts.
    pub fn min_batch(&self) -> usize {
        let batch_norm = self.graphs().iter().any(|(_, g)| {
            g.layers().iter().any(|l| matches!(l, crate::nn::Layer::Norm(n) if n.kind == crate::nn::NormKind::Batch))
        });
        if self.kind == TaskKind::Cpc || batch_norm {
            2
        } else {
            1
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let got = DataInfo::of(data);
        if (got.resolution, got.channels) != (self.info.resolution, self.info.channels) {
            return Err(Error::Data(format!(
                "supervisor expects {0}x{0}x{1} images, dataset has {2}x{2}x{3}",
                self.info.resolution, self.info.channels, got.resolution, got.channels
            )));
        }
        if self.kind.uses_indices() && got.len != self.info.len {
            return Err(Error::Data(format!(
                "{} state is sized for {} images, dataset has {}",
                self.kind, self.info.len, got.len
            )));
        }
        Ok(())
    }

    fn metadata(&self, train: Option<&TrainConfig>) -> Result<Map<String, Value>> {
        let mut meta = Map::new();
        meta.insert("task".into(), serde_json::to_value(self.kind)?);
        meta.insert("task_config".into(), serde_json::to_value(&self.task)?);
        meta.insert("data".into(), serde_json::to_value(self.info)?);
        meta.insert("seed".into(), Value::from(self.seed));
        if let Some(cfg) = train {
            meta.insert("train_config".into(), serde_json::to_value(cfg)?);
        }
        Ok(meta)
    }

    /// Writes every network plus task metadata to `path`.
    pub fn save(&self, path: impl AsRef<Path>, train: Option<&TrainConfig>) -> Result<()> {
        let graphs = self.graphs();
        let refs: Vec<(&str, &ModuleGraph)> = graphs.iter().map(|(n, g)| (n.as_str(), *g)).collect();
        Checkpoint::from_graphs(&refs, self.metadata(train)?).write(path)
    }

    fn load_weights(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let task = ckpt.metadata.get("task").cloned().map(serde_json::from_value::<TaskKind>).transpose()?;
        if task != Some(self.kind) {
            let found = task.map_or("no task".to_string(), |t| t.to_string());
            return Err(Error::Checkpoint(format!("checkpoint holds {found}, expected {}", self.kind)));
        }
        let mut graphs = self.nets.graphs_mut();
        let mut refs: Vec<(&str, &mut ModuleGraph)> = graphs.iter_mut().map(|(n, g)| (n.as_str(), &mut **g)).collect();
        ckpt.load_into(&mut refs)
    }

    pub fn load_pretrained(&mut self, name: &Path, pretrained: bool) -> Result<()> {
        if !pretrained {
            return Ok(());
        }
        if !name.exists() {
            return Err(Error::Checkpoint(format!("no pretrained checkpoint at {}", name.display())));
        }
        self.load_weights(&Checkpoint::read(name)?)
    }

    pub fn init_data_optimizer(&mut self, cfg: &TrainConfig, cancel: &CancelToken) -> Result<TrainState> {
        let schedule = LRSchedule::step(cfg.lr, cfg.lr_schedule.step_size, cfg.lr_schedule.gamma);
        self.state.lr = cfg.lr;
        if self.kind.is_adversarial() {
            self.state.disc_opt = Some(Optimizer::new(cfg.optimizer));
        }
        Ok(TrainState {
            optimizer: Optimizer::new(cfg.optimizer),
            schedule,
            lr: cfg.lr,
            step: 0,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            shuffle: cfg.shuffle,
            num_workers: cfg.num_workers,
            verbose: cfg.verbose,
            cancel: cancel.clone(),
            report: TrainReport::new(self.kind),
        })
    }

    /// Draws every random input of one step for `batch`.
    pub fn prepare(&mut self, batch: &Batch) -> Result<Prepared> {
        tasks::prepare(self, batch)
    }

    /// The task loss for prepared inputs. Pure apart from batch-norm
    /// running statistics; bank and queue writes are returned as [`Effects`].
    pub fn loss(&mut self, tape: &mut Tape, prepared: &Prepared) -> Result<(StepLoss, Effects)> {
        tasks::loss(self, tape, prepared)
    }

    /// One discriminator update for adversarial tasks; returns its loss.
    pub fn discriminator_step(&mut self, prepared: &Prepared) -> Result<Option<f64>> {
        tasks::discriminator_step(self, prepared)
    }

    pub fn apply_effects(&mut self, effects: Effects) -> Result<()> {
        if let Some(bank) = self.state.bank.as_mut() {
            for (i, v) in &effects.bank {
                bank.update(*i, v)?;
            }
        }
        if let Some(bank) = self.state.bank_ab.as_mut() {
            for (i, v) in &effects.bank_ab {
                bank.update(*i, v)?;
            }
        }
        if let Some(queue) = self.state.queue.as_mut() {
            queue.push(effects.queue);
        }
        Ok(())
    }

    /// prepare, discriminator step, loss, then bank and queue writes.
    pub fn forward(&mut self, tape: &mut Tape, batch: &Batch) -> Result<StepLoss> {
        let prepared = self.prepare(batch)?;
        let d = self.discriminator_step(&prepared)?;
        let (mut loss, effects) = self.loss(tape, &prepared)?;
        self.apply_effects(effects)?;
        if let Some(d) = d {
            loss.components.push(("d", d));
        }
        Ok(loss)
    }

    pub fn update(&mut self, tape: &mut Tape, loss: &StepLoss, state: &mut TrainState) -> Result<()> {
        tape.backward(loss.loss)?;
        state.optimizer.step(&mut self.nets.trainable(), tape, state.lr)?;
        self.nets.after_step(self.task.momentum)?;
        state.step += 1;
        state.lr = state.schedule.lr(state.step);
        self.state.lr = state.lr;
        Ok(())
    }

    /// Runs all five phases with a fresh cancellation token.
    pub fn supervise(&mut self, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
        supervise(self, data, cfg, &CancelToken::new())
    }
}

fn read_meta<T: serde::de::DeserializeOwned>(meta: &Map<String, Value>, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {key:?}")))?;
    Ok(serde_json::from_value(v.clone())?)
}

fn from_checkpoint(ckpt: &Checkpoint, expected: Option<TaskKind>) -> Result<Supervisor> {
    let kind: TaskKind = read_meta(&ckpt.metadata, "task")?;
    if let Some(want) = expected {
        if want != kind {
            return Err(Error::Checkpoint(format!("checkpoint holds {kind}, expected {want}")));
        }
    }
    let task: TaskConfig = read_meta(&ckpt.metadata, "task_config")?;
    let info: DataInfo = read_meta(&ckpt.metadata, "data")?;
    let seed: u64 = read_meta(&ckpt.metadata, "seed")?;
    let mut sup = Supervisor::new(kind, info, task, seed)?;
    sup.load_weights(ckpt)?;
    Ok(sup)
}

/// Rebuilds a supervisor of `kind` from the checkpoint at `name`.
pub fn load_supervisor(kind: TaskKind, name: impl AsRef<Path>) -> Result<Supervisor> {
    from_checkpoint(&Checkpoint::read(name)?, Some(kind))
}

/// Like [`load_supervisor`] but takes the task kind from the checkpoint.
pub fn load_any_supervisor(name: impl AsRef<Path>) -> Result<Supervisor> {
    from_checkpoint(&Checkpoint::read(name)?, None)
}
