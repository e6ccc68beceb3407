//! `stmixer` command-line tool: data generation, training, bank building,
//! evaluation and per-stage visualization export.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 numeric failure,
//! 5 I/O or file format, 1 anything else.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stmixer::checkpoint::{payload_digest, Checkpoint};
use stmixer::config::{DatasetLayout, Phase, TrainConfig};
use stmixer::eval::frame_map;
use stmixer::longterm::QueryBank;
use stmixer::model::StMixer;
use stmixer::synthdata::{read_manifest, write_manifest, ClipSample, DatasetSpec, NUM_CLASSES};
use stmixer::trainer::{resume, train};
use stmixer::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "stmixer", version, about = "Sparse spatiotemporal action detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Clips,
    LongVideos,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset manifest regenerable from its seeds.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Number of clips (or videos for the long-video layout).
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Config file whose `data.*` keys set the generator.
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long, value_enum)]
        layout: Option<Layout>,
        #[arg(long)]
        clips_per_video: Option<usize>,
    },
    /// Train a short-term model.
    Train(TrainArgs),
    /// Train a long-term model against a query bank.
    TrainLong {
        #[command(flatten)]
        args: TrainArgs,
        /// Checkpoint holding the bank of the training videos.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Run a short-term checkpoint over a dataset and store its query bank.
    BuildBank {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config whose training set supplies the videos.
        #[arg(long, conflicts_with = "data")]
        config: Option<PathBuf>,
        /// Manifest of the videos; defaults to the checkpoint's training set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frame mAP of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Bank of the evaluated videos, for long-term checkpoints.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-stage sampling points, boxes and scores for one clip.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Clip index in manifest order.
        #[arg(long)]
        clip: usize,
        /// Manifest to draw the clip from; defaults to the checkpoint's training set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Metrics JSON-lines file; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Overrides applied after the config file, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from this checkpoint instead of fresh parameters.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::Config(_)) => EXIT_CONFIG,
            CliError::Core(Error::Numeric { .. }) => EXIT_NUMERIC,
            CliError::Core(Error::Io(_) | Error::Format(_)) => EXIT_IO,
            CliError::Core(_) => EXIT_OTHER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stmixer: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData {
            seed,
            count,
            out,
            cfg,
            layout,
            clips_per_video,
        } => gen_data(seed, count, &out, cfg.as_deref(), layout, clips_per_video),
        Command::Train(args) => cmd_train(&args, Phase::Short, None),
        Command::TrainLong { args, bank } => {
            let bank = bank.ok_or_else(|| usage("train-long requires --bank"))?;
            cmd_train(&args, Phase::Long, Some(&bank))
        }
        Command::BuildBank {
            checkpoint,
            config,
            data,
            out,
        } => build_bank(&checkpoint, config.as_deref(), data.as_deref(), &out),
        Command::Eval {
            checkpoint,
            data,
            iou,
            bank,
            out,
        } => eval(&checkpoint, &data, iou, bank.as_deref(), &out),
        Command::Visualize {
            checkpoint,
            clip,
            data,
            bank,
            out,
        } => visualize(&checkpoint, clip, data.as_deref(), bank.as_deref(), &out),
    }
}

fn gen_data(
    seed: u64,
    count: usize,
    out: &Path,
    cfg: Option<&Path>,
    layout: Option<Layout>,
    clips_per_video: Option<usize>,
) -> CliResult<()> {
    let mut config = match cfg {
        Some(p) => TrainConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => TrainConfig::desk(),
    };
    if let Some(l) = layout {
        config.layout = match l {
            Layout::Clips => DatasetLayout::Clips,
            Layout::LongVideos => DatasetLayout::LongVideos,
        };
    }
    if let Some(c) = clips_per_video {
        config.clips_per_video = c;
    }
    config.data.validate().map_err(|e| usage(e.to_string()))?;
    let spec = match config.layout {
        DatasetLayout::Clips => DatasetSpec::clips(seed, count, config.data.clone()),
        DatasetLayout::LongVideos => {
            if config.clips_per_video == 0 {
                return Err(usage("--clips-per-video must be positive"));
            }
            DatasetSpec::long_videos(seed, count, config.clips_per_video, config.data.clone())
        }
    };
    let written = write_manifest(out, &spec).map_err(|e| match e {
        Error::Io(io) => usage(format!("cannot write {}: {io}", out.display())),
        other => CliError::Core(other),
    })?;
    log::info!("wrote {written} records to {}", out.display());
    Ok(())
}

fn load_config(args: &TrainArgs, phase: Phase) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::load(&args.config)?;
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.phase = phase;
    cfg.validate()?;
    Ok(cfg)
}

fn load_bank(path: &Path) -> CliResult<QueryBank> {
    Checkpoint::load(path)?
        .bank
        .ok_or_else(|| CliError::Core(Error::Format(format!("{} holds no query bank", path.display()))))
}

fn cmd_train(args: &TrainArgs, phase: Phase, bank: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(args, phase)?;
    eprintln!("effective config:\n{}", cfg.to_text());
    let bank = bank.map(load_bank).transpose()?;
    let videos = cfg.train_spec().generate()?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("metrics.jsonl"));
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let outcome = match &args.resume {
        Some(p) => {
            let (model, _) = Checkpoint::load(p)?.into_model()?;
            resume(model, &cfg, &videos, bank.as_ref(), Some(&mut metrics))
        }
        None => train(&cfg, &videos, bank.as_ref(), Some(&mut metrics)),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            if let Error::Numeric { step, detail } = &e {
                let line = serde_json::json!({ "abort": "numeric", "step": step, "detail": detail });
                writeln!(metrics, "{line}")?;
            }
            metrics.flush()?;
            return Err(e.into());
        }
    };
    metrics.flush()?;
    let ck = Checkpoint::from_model(&outcome.model, None);
    let bytes = ck.encode();
    std::fs::write(&args.out, &bytes)?;
    if let Some(last) = outcome.records.last() {
        log::info!("final loss {:.5}", last.loss);
    }
    println!("payload sha256 {}", payload_digest(&bytes)?);
    Ok(())
}

/// Groups manifest clips back into videos, checking they fit the model.
fn load_videos(model: &StMixer, data: Option<&Path>) -> CliResult<Vec<Vec<ClipSample>>> {
    let spec = match data {
        Some(p) => read_manifest(p)?.0,
        None => model.cfg.train_spec(),
    };
    model.cfg.check_data(&spec.cfg)?;
    Ok(spec.generate()?)
}

fn build_bank(checkpoint: &Path, config: Option<&Path>, data: Option<&Path>, out: &Path) -> CliResult<()> {
    let (model, _) = Checkpoint::load(checkpoint)?.into_model()?;
    let videos = match config {
        Some(p) => {
            let spec = TrainConfig::load(p)?.train_spec();
            model.cfg.check_data(&spec.cfg)?;
            spec.generate()?
        }
        None => load_videos(&model, data)?,
    };
    let bank = model.build_bank(&videos)?;
    Checkpoint::from_model(&model, Some(&bank)).save(out)?;
    Ok(())
}

/// The bank for `model`: the explicit file, else one stored alongside it.
fn bank_for(model: &StMixer, own: Option<QueryBank>, path: Option<&Path>) -> CliResult<Option<QueryBank>> {
    if model.phase() == Phase::Short {
        return Ok(None);
    }
    match path {
        Some(p) => Ok(Some(load_bank(p)?)),
        None => own
            .map(Some)
            .ok_or_else(|| usage("a long-term checkpoint needs --bank")),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, iou: f64, bank: Option<&Path>, out: &Path) -> CliResult<()> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(usage(format!("--iou must lie in [0, 1], got {iou}")));
    }
    let (model, own) = Checkpoint::load(checkpoint)?.into_model()?;
    let bank = bank_for(&model, own, bank)?;
    let videos = load_videos(&model, Some(data))?;
    let dets = model.detect_all(&videos, bank.as_ref())?;
    let gts: Vec<_> = videos.iter().flatten().map(|c| c.gt.clone()).collect();
    let report = frame_map(&dets, &gts, NUM_CLASSES, iou);
    write_json(out, &report)?;
    println!("mAP {:.4}", report.map);
    Ok(())
}

fn visualize(
    checkpoint: &Path,
    clip: usize,
    data: Option<&Path>,
    bank: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let (model, own) = Checkpoint::load(checkpoint)?.into_model()?;
    let bank = bank_for(&model, own, bank)?;
    let videos = load_videos(&model, data)?;
    let (v, t) = videos
        .iter()
        .enumerate()
        .flat_map(|(v, clips)| (0..clips.len()).map(move |t| (v, t)))
        .nth(clip)
        .ok_or_else(|| usage(format!("clip {clip} is out of range")))?;
    let window = model.window_for(bank.as_ref(), v, t)?;
    let export = model.visualize(&videos[v][t].video, window.as_ref())?;
    write_json(out, &export)
}
