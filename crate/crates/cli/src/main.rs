//! `pretext train | extract | probe`.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pretext::probe::{extract_features, linear_probe, read_features, write_features, ProbeConfig};
use pretext::supervisors::{load_any_supervisor, supervise, CancelToken, DataInfo, Supervisor};
use serde_json::json;

use config::{RunConfig, DEFAULT_SIZE};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit status 2.
    Usage(String),
    /// Failure while running; exit status 1.
    Run(String),
}

impl From<pretext::Error> for CliError {
    fn from(e: pretext::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "pretext", version, about = "Self-supervised pretext-task training for images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a supervisor and store its checkpoint at --name.
    Train(Shared),
    /// Write frozen backbone features of a dataset to an SSFX file.
    Extract {
        #[command(flatten)]
        shared: Shared,
        /// Output file (default: <name>.features).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a linear classifier on frozen features and report accuracy.
    Probe {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        probe: ProbeArgs,
    },
}

#[derive(Args)]
struct Shared {
    /// JSON file with flat keys mirroring the flags; flags win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

impl Shared {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        Ok(base.overlay(&self.run))
    }
}

#[derive(Args)]
struct ProbeArgs {
    /// Feature file from `extract`; without it features come from --name.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    probe_lr: f64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// JSON report path (default: <features or name>.probe.json).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn train(shared: &Shared) -> Result<(), CliError> {
    let cfg = shared.resolve()?;
    let kind = cfg.require_task()?;
    let train = cfg.train_config();
    let task = cfg.task_config(kind)?;
    let data = cfg.dataset(DEFAULT_SIZE)?;
    let mut sup = Supervisor::new(kind, DataInfo::of(&data), task.clone(), cfg.seed())?;

    let cancel = CancelToken::new();
    let on_signal = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || on_signal.cancel()) {
        eprintln!("warning: cannot install interrupt handler: {e}");
    }
    let report = supervise(&mut sup, &data, &train, &cancel)?;

    let report_path = with_suffix(&train.name, ".report.json");
    write_json(
        &report_path,
        &json!({
            "report": report,
            "config": {
                "task": kind,
                "data": cfg.data,
                "synth": cfg.synth,
                "size": data.resolution(),
                "images": data.len(),
                "seed": cfg.seed(),
                "train": train,
                "task_config": task,
            },
        }),
    )?;
    let steps = report.step_losses.len();
    let last = report.step_losses.last().map_or("n/a".to_string(), |l| format!("{l:.4}"));
    println!(
        "{kind}: {} of {} epochs, {steps} steps, last loss {last}, {:.1}s{}",
        report.epochs_completed,
        train.epochs,
        report.wall_time_secs,
        if report.interrupted { " (interrupted)" } else { "" }
    );
    println!("checkpoint {}; report {}", train.name.display(), report_path.display());
    Ok(())
}

/// Loads the checkpoint at --name, checking --task when given.
fn load_checkpoint(cfg: &RunConfig) -> Result<(Supervisor, PathBuf), CliError> {
    let name = cfg.name.clone().ok_or_else(|| CliError::Usage("--name (checkpoint path) is required".into()))?;
    let sup = load_any_supervisor(&name)?;
    if let Some(kind) = cfg.task_kind()? {
        if kind != sup.kind() {
            return Err(CliError::Run(format!("checkpoint {} holds {}, not {kind}", name.display(), sup.kind())));
        }
    }
    Ok((sup, name))
}

fn extract(shared: &Shared, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = shared.resolve()?;
    let (sup, name) = load_checkpoint(&cfg)?;
    let data = cfg.dataset(sup.data_info().resolution)?;
    let features = extract_features(&sup, &data, 64)?;
    let out = out.map_or_else(|| with_suffix(&name, ".features"), Path::to_path_buf);
    write_features(&out, &features)?;
    println!("wrote {}x{} features to {}", features.shape()[0], features.shape()[1], out.display());
    Ok(())
}

fn probe(shared: &Shared, args: &ProbeArgs) -> Result<(), CliError> {
    let cfg = shared.resolve()?;
    let (features, data, base) = match &args.features {
        Some(path) => (read_features(path)?, cfg.dataset(DEFAULT_SIZE)?, path.clone()),
        None => {
            let (sup, name) = load_checkpoint(&cfg)?;
            let data = cfg.dataset(sup.data_info().resolution)?;
            (extract_features(&sup, &data, 64)?, data, name)
        }
    };
    let labels = data.labels().ok_or_else(|| CliError::Run("probe needs a label for every image".into()))?;
    let probe_cfg =
        ProbeConfig { epochs: args.probe_epochs, lr: args.probe_lr, val_fraction: args.val_fraction, seed: cfg.seed() };
    let report = linear_probe(&features, &labels, &probe_cfg)?;
    let path = args.report.clone().unwrap_or_else(|| with_suffix(&base, ".probe.json"));
    write_json(&path, &json!({ "probe": report, "config": probe_cfg }))?;
    println!(
        "train accuracy {:.4}, val accuracy {:.4} ({} train / {} val, {} classes); report {}",
        report.train_accuracy,
        report.val_accuracy,
        report.n_train,
        report.n_val,
        report.classes,
        path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(shared) => train(shared),
        Command::Extract { shared, out } => extract(shared, out.as_deref()),
        Command::Probe { shared, probe: args } => probe(shared, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
