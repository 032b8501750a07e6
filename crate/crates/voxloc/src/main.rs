//! Command-line entry point: phantom generation, training, evaluation,
//! and single-episode rollouts.
//!
//! Exit codes are stable: 0 success, 2 configuration or usage error,
//! 3 I/O or data-file error, 4 training divergence, 5 unusable
//! checkpoint.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use voxloc::config::{parse_config, Config, ConfigError};
use voxloc::eval::{evaluate, evaluate_oracle, export_trace, rollout, EvalError};
use voxloc::phantom::{generate_dataset, load_labeled, load_manifest_volumes, parse_manifest, LabeledVolume, PhantomError};
use voxloc::qnet::{QNetError, QNetwork};
use voxloc::trainer::{train, TrainError};

#[derive(Parser)]
#[command(name = "voxloc", version, about = "Q-learning bounding-box localization in 3D volumes")]
struct Cli {
    /// Config file (`key = value` lines, '#' comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-key override, e.g. `--set env.alpha=0.2`; repeatable,
    /// applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset with train/test manifests.
    GenPhantoms {
        /// Output directory for volumes, sidecars, and manifests.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a localization network for one organ.
    Train {
        /// Manifest of training volumes.
        #[arg(long)]
        manifest: PathBuf,
        /// Organ id to localize.
        #[arg(long, default_value_t = 1)]
        organ: u32,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over a test manifest.
    Eval {
        /// Manifest of evaluation volumes.
        #[arg(long)]
        manifest: PathBuf,
        /// Organ id to localize.
        #[arg(long, default_value_t = 1)]
        organ: u32,
        /// Trained checkpoint; not needed with --oracle.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Directory for report.csv (defaults to the current directory).
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Score the truth boxes as predictions; a metric-plumbing
        /// self-test that bypasses the network.
        #[arg(long)]
        oracle: bool,
    },
    /// Run one greedy episode on a single volume and export its trace.
    Rollout {
        /// Volume file (VOL1).
        #[arg(long)]
        volume: PathBuf,
        /// Truth sidecar; defaults to the volume path with `.vol1`
        /// replaced by `.truth.txt`.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Organ id to localize.
        #[arg(long, default_value_t = 1)]
        organ: u32,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output path for the trace CSV.
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] PhantomError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(QNetError),
}

fn phantom_exit_code(e: &PhantomError) -> u8 {
    match e {
        PhantomError::InvalidSpec(_) | PhantomError::PlacementFailed { .. } => 2,
        _ => 3,
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Data(e) => phantom_exit_code(e),
            CliError::Train(e) => match e {
                TrainError::NonFiniteLoss { .. } => 4,
                TrainError::Net(QNetError::NonFiniteGradient) => 4,
                TrainError::Net(QNetError::Io(_)) => 3,
                TrainError::Net(_) => 5,
                TrainError::Data(p) => phantom_exit_code(p),
                _ => 2,
            },
            CliError::Eval(e) => match e {
                EvalError::Data(p) => phantom_exit_code(p),
                EvalError::TraceParse { .. } | EvalError::Io(_) => 3,
                _ => 2,
            },
            CliError::Checkpoint(e) => match e {
                QNetError::Io(_) => 3,
                _ => 5,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Resolves the effective config: file, then `--set` overrides, then
/// `--seed`, then validation. Printed before every command runs.
fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None => Config::default(),
    };
    for pair in &cli.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set {pair:?}: expected KEY=VALUE")))?;
        cfg.apply(key.trim(), value)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    print!("{}", cfg.to_display_string());
    println!("---");
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::GenPhantoms { out } => cmd_gen_phantoms(&cfg, out),
        Cmd::Train { manifest, organ, out } => cmd_train(&cfg, manifest, *organ, out),
        Cmd::Eval { manifest, organ, checkpoint, out, oracle } => {
            cmd_eval(&cfg, manifest, *organ, checkpoint.as_deref(), out, *oracle)
        }
        Cmd::Rollout { volume, truth, organ, checkpoint, trace } => {
            cmd_rollout(&cfg, volume, truth.as_deref(), *organ, checkpoint, trace)
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::new(), |mut s, b| {
        use std::fmt::Write as _;
        write!(s, "{b:02x}").expect("string write");
        s
    })
}

/// Hash of a manifest and every file it references, in listing order;
/// identical datasets produce identical hashes.
fn dataset_hash(manifest_path: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    for entry in parse_manifest(&text)? {
        hasher.update(std::fs::read(root.join(&entry.volume))?);
        hasher.update(std::fs::read(root.join(&entry.sidecar))?);
    }
    Ok(sha256_hex(&hasher.finalize()))
}

fn cmd_gen_phantoms(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let paths = generate_dataset(out, &cfg.phantom_spec(), cfg.n_train, cfg.n_test)?;
    for (name, manifest) in [("train", &paths.train_manifest), ("test", &paths.test_manifest)] {
        println!("{name} manifest: {}", manifest.display());
        println!("{name} dataset sha256: {}", dataset_hash(manifest)?);
    }
    Ok(())
}

fn load_checkpoint(path: &Path, crop_edge: u32) -> Result<QNetwork<f32>, CliError> {
    let bytes = std::fs::read(path)?;
    let net = QNetwork::<f32>::from_bytes(&bytes).map_err(CliError::Checkpoint)?;
    net.ensure_crop_edge(crop_edge).map_err(CliError::Checkpoint)?;
    Ok(net)
}

fn cmd_train(cfg: &Config, manifest: &Path, organ: u32, out: &Path) -> Result<(), CliError> {
    let volumes: Vec<Arc<LabeledVolume>> =
        load_manifest_volumes(manifest)?.into_iter().map(Arc::new).collect();
    let result = train(&volumes, organ, cfg.train_config(), cfg.env.clone())?;
    std::fs::create_dir_all(out)?;
    let ckpt = out.join("checkpoint.qnt1");
    result.net.save(&ckpt).map_err(CliError::Checkpoint)?;
    std::fs::write(out.join("train_log.csv"), result.log.to_csv())?;
    println!("checkpoint: {}", ckpt.display());
    if cfg.train.epochs > 0 {
        let last = cfg.train.epochs - 1;
        let mean_iou = result.log.epoch_mean_final_iou(last).unwrap_or(0.0);
        let n = result.log.rows.iter().filter(|r| r.epoch == last).count();
        println!("epoch {last}: mean final IoU {mean_iou:.4} over {n} episodes");
    } else {
        println!("epochs = 0: wrote the freshly initialized network");
    }
    Ok(())
}

fn cmd_eval(
    cfg: &Config,
    manifest: &Path,
    organ: u32,
    checkpoint: Option<&Path>,
    out: &Path,
    oracle: bool,
) -> Result<(), CliError> {
    let volumes: Vec<Arc<LabeledVolume>> =
        load_manifest_volumes(manifest)?.into_iter().map(Arc::new).collect();
    let report = if oracle {
        evaluate_oracle(&volumes, organ)?
    } else {
        let path = checkpoint.expect("clap requires --checkpoint without --oracle");
        let net = load_checkpoint(path, cfg.env.crop_edge)?;
        evaluate(&net, &volumes, organ, &cfg.env)?
    };
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("report.csv");
    std::fs::write(&csv_path, report.to_csv())?;
    print!("{}", report.render_table());
    println!("report: {}", csv_path.display());
    Ok(())
}

/// `foo.vol1` -> `foo.truth.txt`, next to the volume.
fn derive_sidecar(volume: &Path) -> PathBuf {
    let stem = volume
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let base = stem.strip_suffix(".vol1").unwrap_or(&stem);
    volume.with_file_name(format!("{base}.truth.txt"))
}

fn cmd_rollout(
    cfg: &Config,
    volume: &Path,
    truth: Option<&Path>,
    organ: u32,
    checkpoint: &Path,
    trace_path: &Path,
) -> Result<(), CliError> {
    let sidecar = truth.map(PathBuf::from).unwrap_or_else(|| derive_sidecar(volume));
    let labeled = Arc::new(load_labeled(volume, &sidecar)?);
    let net = load_checkpoint(checkpoint, cfg.env.crop_edge)?;
    let trace = rollout(&net, labeled, organ, &cfg.env)?;
    export_trace(&trace, trace_path)?;
    let c = trace.predicted.corners();
    println!("termination: {}", trace.termination.token());
    println!(
        "predicted box: [{:.3}, {:.3}, {:.3}] -> [{:.3}, {:.3}, {:.3}]",
        c[0], c[1], c[2], c[3], c[4], c[5]
    );
    println!("IoU: {:.6}", trace.predicted_iou);
    println!("trace: {}", trace_path.display());
    Ok(())
}
