//! Run configuration shared by every command: a flat JSON file whose keys
//! mirror the command-line flags, with flags taking precedence.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use pretext::data::{dataset_from_dir, synth_dataset, Dataset, SyntheticSpec};
use pretext::nn::OptimizerKind;
use pretext::supervisors::{StepLr, TaskConfig, TaskKind, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const DEFAULT_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Pretext task (rotatenet, exemplarnet, jigsaw, denoise, context,
    /// splitbrain, bigan, id, cpc, moc, cmc, byol, pirl).
    #[arg(long)]
    pub task: Option<String>,
    /// Directory of .ppm images with an optional labels.tsv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use N generated disk/square images instead of --data.
    #[arg(long, value_name = "N")]
    pub synth: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Steps between learning-rate decays.
    #[arg(long)]
    pub step_size: Option<u64>,
    /// Learning-rate decay factor applied every --step-size steps.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerName>,
    /// Seed for network initialisation, augmentation and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_workers: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub name: Option<PathBuf>,
    /// Start from the weights stored at --name.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub pretrained: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shuffle: Option<bool>,
    /// Print one line per epoch to stderr.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub verbose: Option<bool>,
    /// Partial task configuration, e.g. {"temperature": 0.2}. File only.
    #[arg(skip)]
    pub task_config: Option<Map<String, Value>>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Run(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Run(format!("bad config {}: {e}", path.display())))
    }

    /// Values set in `top` replace those in `self`; task-config keys merge.
    pub fn overlay(mut self, top: &RunConfig) -> Self {
        overlay!(
            self, top, task, data, synth, size, epochs, batch_size, lr, step_size, gamma, optimizer, seed, num_workers, name,
            pretrained, shuffle, verbose
        );
        if let Some(extra) = &top.task_config {
            let merged = self.task_config.get_or_insert_with(Map::new);
            for (k, v) in extra {
                merged.insert(k.clone(), v.clone());
            }
        }
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// The requested task; unknown or missing names are usage errors.
    pub fn task_kind(&self) -> Result<Option<TaskKind>, CliError> {
        self.task.as_deref().map(|t| t.parse().map_err(|e: pretext::Error| CliError::Usage(e.to_string()))).transpose()
    }

    pub fn require_task(&self) -> Result<TaskKind, CliError> {
        self.task_kind()?.ok_or_else(|| {
            let names: Vec<&str> = TaskKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Usage(format!("--task is required; valid tasks: {}", names.join(", ")))
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            optimizer: match self.optimizer {
                Some(OptimizerName::Sgd) => OptimizerKind::sgd(),
                Some(OptimizerName::Adam) => OptimizerKind::adam(),
                None => d.optimizer,
            },
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            shuffle: self.shuffle.unwrap_or(d.shuffle),
            num_workers: self.num_workers.unwrap_or(d.num_workers),
            name: self.name.clone().unwrap_or(d.name),
            pretrained: self.pretrained.unwrap_or(d.pretrained),
            lr_schedule: StepLr {
                step_size: self.step_size.unwrap_or(d.lr_schedule.step_size),
                gamma: self.gamma.unwrap_or(d.lr_schedule.gamma),
            },
            verbose: self.verbose.unwrap_or(d.verbose),
        }
    }

    /// Defaults for `kind` with the configured overrides applied.
    pub fn task_config(&self, kind: TaskKind) -> Result<TaskConfig, CliError> {
        let base = TaskConfig::new(kind);
        let Some(extra) = &self.task_config else { return Ok(base) };
        let Value::Object(mut fields) = serde_json::to_value(&base).map_err(|e| CliError::Run(e.to_string()))? else {
            unreachable!("task configs serialize as objects")
        };
        for (k, v) in extra {
            if !fields.contains_key(k) {
                return Err(CliError::Run(format!("unknown task_config key {k:?}")));
            }
            fields.insert(k.clone(), v.clone());
        }
        serde_json::from_value(Value::Object(fields)).map_err(|e| CliError::Run(format!("bad task_config: {e}")))
    }

    /// Loads `--data` or renders `--synth`, at `--size` or `default_size`.
    pub fn dataset(&self, default_size: usize) -> Result<Dataset, CliError> {
        let size = self.size.unwrap_or(default_size);
        match (&self.data, self.synth) {
            (Some(_), Some(_)) => Err(CliError::Usage("--data and --synth are mutually exclusive".into())),
            (Some(dir), None) => Ok(dataset_from_dir(dir, size)?),
            (None, Some(n)) => Ok(synth_dataset(&SyntheticSpec::new(n, size, self.seed()))?),
            (None, None) => Err(CliError::Usage("one of --data or --synth is required".into())),
        }
    }
}
