//! `hcp`: one binary binding synthesis, training, inference, evaluation,
//! and gradient verification into reproducible seeded runs.
//!
//! Every subcommand works out of a run directory (default
//! `runs/<subcommand>-<unix-time>`, overridable with `--run-dir`), starts
//! by echoing its effective config there, and exits with a code that
//! telegraphs the failure class: 2 config, 3 missing or unreadable input,
//! 4 gradient-check failure, 5 pipeline error.

mod commands;
mod config;
mod data;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;
pub const EXIT_PIPELINE: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    MissingInput(String),
    #[error("gradient checks failed")]
    Gradcheck,
    #[error("{0}")]
    Pipeline(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingInput(_) => EXIT_MISSING_INPUT,
            CliError::Gradcheck => EXIT_GRADCHECK,
            CliError::Pipeline(_) => EXIT_PIPELINE,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hcp",
    version,
    about = "Human-centric LiDAR perception: synthetic scenes, training, inference, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run config; defaults fill anything omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.steps=500. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for frame-level stages; default 1 (serial).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; default runs/<subcommand>-<unix-time>.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic train/test split.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Total frames in the split (80/20 train/test).
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the interaction-aware instance-segmentation model.
    TrainSeg {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory of .hcpf/.hcpa training frames.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Training steps; overrides the config file.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the action-recognition pipeline on annotated person boxes.
    TrainAction {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run instance segmentation over a frame directory.
    Segment {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Trained segmentation checkpoint (.hcpc).
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Classify actions for each frame's annotated person boxes.
    Recognize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Trained action checkpoint (.hcpc).
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Score predictions: semantic mIoU and instance AP.
    EvalSeg {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory of .hcpp prediction files.
        #[arg(long, value_name = "DIR")]
        predictions: PathBuf,
        /// Directory of matching .hcpa annotations.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Score predictions: center-distance detection AP.
    EvalDet {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "DIR")]
        predictions: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Score predictions: action mAP, mRecall, mPrecision.
    EvalAction {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "DIR")]
        predictions: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Run every finite-difference gradient check; exit 4 on failure.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TrainSeg { .. } => "train-seg",
            Command::TrainAction { .. } => "train-action",
            Command::Segment { .. } => "segment",
            Command::Recognize { .. } => "recognize",
            Command::EvalSeg { .. } => "eval-seg",
            Command::EvalDet { .. } => "eval-det",
            Command::EvalAction { .. } => "eval-action",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::Synth { common, .. }
            | Command::TrainSeg { common, .. }
            | Command::TrainAction { common, .. }
            | Command::Segment { common, .. }
            | Command::Recognize { common, .. }
            | Command::EvalSeg { common, .. }
            | Command::EvalDet { common, .. }
            | Command::EvalAction { common, .. }
            | Command::Gradcheck { common } => common,
        }
    }

    /// Flag-level overrides folded into the config table, after --set.
    fn extra_overrides(&self) -> Vec<(String, String)> {
        let mut extra = Vec::new();
        match self {
            Command::Synth { frames: Some(n), .. } => {
                extra.push(("frames".to_string(), n.to_string()));
            }
            Command::TrainSeg { steps: Some(n), .. }
            | Command::TrainAction { steps: Some(n), .. } => {
                extra.push(("train.steps".to_string(), n.to_string()));
            }
            _ => {}
        }
        extra
    }
}

fn build_config(command: &Command) -> Result<config::RunConfig, CliError> {
    let common = command.common();
    let mut overrides = Vec::new();
    for entry in &common.set {
        let (key, value) = entry.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set expects KEY=VALUE, got '{entry}'"))
        })?;
        overrides.push((key.to_string(), value.to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    if let Some(jobs) = common.jobs {
        overrides.push(("jobs".to_string(), jobs.to_string()));
    }
    overrides.extend(command.extra_overrides());
    config::load_run_config(common.config.as_deref(), &overrides)
}

/// Creates and returns the run directory. The timestamp lives only in the
/// directory name; nothing written inside depends on wall-clock time.
fn resolve_run_dir(name: &str, explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = match explicit {
        Some(path) => path.to_path_buf(),
        None => {
            let now = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default();
            PathBuf::from(format!(
                "runs/{name}-{}-{:09}",
                now.as_secs(),
                now.subsec_nanos()
            ))
        }
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Pipeline(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let cfg = build_config(&command)?;
    let run_dir = resolve_run_dir(command.name(), command.common().run_dir.as_deref())?;
    match &command {
        Command::Synth { .. } => commands::cmd_synth(cfg, &run_dir),
        Command::TrainSeg { data, .. } => commands::cmd_train_seg(cfg, data, &run_dir),
        Command::TrainAction { data, .. } => commands::cmd_train_action(cfg, data, &run_dir),
        Command::Segment { data, checkpoint, .. } => {
            commands::cmd_segment(cfg, data, checkpoint, &run_dir)
        }
        Command::Recognize { data, checkpoint, .. } => {
            commands::cmd_recognize(cfg, data, checkpoint, &run_dir)
        }
        Command::EvalSeg { predictions, data, .. } => {
            commands::cmd_eval_seg(cfg, predictions, data, &run_dir)
        }
        Command::EvalDet { predictions, data, .. } => {
            commands::cmd_eval_det(cfg, predictions, data, &run_dir)
        }
        Command::EvalAction { predictions, data, .. } => {
            commands::cmd_eval_action(cfg, predictions, data, &run_dir)
        }
        Command::Gradcheck { .. } => commands::cmd_gradcheck(cfg, &run_dir),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
