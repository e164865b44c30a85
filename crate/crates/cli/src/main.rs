//! `manet` command-line tool: dataset generation, training, evaluation,
//! prediction and offline metrics.
//!
//! Runtime failures print one JSON line to stderr,
//! `{"error":{"kind":..,"message":..}}`, and exit with status 1. Usage
//! errors exit with status 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use manet::backbone::ModelConfig;
use manet::datagen::{generate_dataset, load_clip_dir, Dataset, GenSpec, ManifestRow};
use manet::emotion::{evaluate_emotion, load_emotion_model, train_emotion, EmotionConfig};
use manet::metrics::{MetricsReport, Scale};
use manet::report::{canonical_json, write_canonical, write_report};
use manet::taxonomy::{load_taxonomy, Split};
use manet::trainer::{
    alpha_sweep, evaluate, load_model, metrics_from_dump, predict, sweep_table, train, PredictionRow,
    TrainConfig, TrainOutput,
};

/// Directory searched for `<command>.json` default configs.
const CONFIG_DIR_ENV: &str = "MANET_CONFIG_DIR";

#[derive(Parser)]
#[command(name = "manet", version, about = "Micro-action recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen(GenArgs),
    /// Train the recognizer
    Train(TrainArgs),
    /// Evaluate a recognizer checkpoint on a dataset split
    Eval(EvalArgs),
    /// Rank classes for one clip directory
    Predict(PredictArgs),
    /// Compute a report from a prediction dump and a manifest
    Metrics(MetricsArgs),
    /// Train the joint emotion / micro-action model
    TrainEmotion(TrainArgs),
    /// Evaluate an emotion checkpoint
    EvalEmotion(EvalArgs),
    /// Train once per embedding-loss weight and tabulate the results
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// JSON generator spec; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_fine: Option<usize>,
    #[arg(long)]
    num_coarse: Option<usize>,
    #[arg(long)]
    clips_per_class: Option<usize>,
    /// Long-tailed class counts `round(clips_per_class * k^-e)`
    #[arg(long)]
    long_tail: Option<f64>,
    #[arg(long)]
    raw_frames: Option<usize>,
    /// Square frame side in pixels
    #[arg(long)]
    side: Option<usize>,
    /// Emotion-style dataset with this many emotion classes
    #[arg(long)]
    emotions: Option<usize>,
    /// Actions per clip for emotion-style data, e.g. `1-4`
    #[arg(long, value_parser = parse_range)]
    actions: Option<[usize; 2]>,
    /// Per-class train:val:test ratio, e.g. `2:1:1`
    #[arg(long, value_parser = parse_ratio)]
    split: Option<[usize; 3]>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size network: width 64, [3,4,6,3] blocks, 224px input
    Paper,
    /// Width 16, one block per stage, 32px input
    Desk,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for log.jsonl and best.ckpt
    #[arg(long)]
    out: PathBuf,
    /// JSON training config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated 0-based epochs at which the learning rate drops
    #[arg(long, value_delimiter = ',')]
    lr_drops: Option<Vec<usize>>,
    /// Embedding-loss weight (recognizer only)
    #[arg(long)]
    alpha: Option<f64>,
    /// Emotion-loss weight (emotion model only)
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report path; printed to stdout when absent
    #[arg(long)]
    report: Option<PathBuf>,
    /// Prediction dump (JSONL)
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Report metrics in percent
    #[arg(long)]
    percent: bool,
    /// Frames per clip (recognizer; defaults to 8)
    #[arg(long, default_value_t = 8)]
    frames: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of frame_0000.png, frame_0001.png, ...
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    fps: u32,
}

#[derive(Args)]
struct MetricsArgs {
    /// Prediction dump: JSONL rows {"clip_id","probs"}
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth manifest
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    percent: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated alpha values
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,1,2,5,10")]
    alphas: Vec<f64>,
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once('-').ok_or("expected LO-HI")?;
    Ok([
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ])
}

fn parse_ratio(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err("expected TRAIN:VAL:TEST".into());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("{e}"))?;
    }
    Ok(out)
}

/// Explicit `--config`, else `$MANET_CONFIG_DIR/<name>.json` if present, else defaults.
fn load_config<T: DeserializeOwned + Default>(explicit: Option<&Path>, name: &str) -> Result<T> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_DIR_ENV)
            .map(|d| PathBuf::from(d).join(format!("{name}.json")))
            .filter(|p| p.exists()),
    };
    match path {
        Some(p) => Ok(manet::io::read_json(&p)?),
        None => Ok(T::default()),
    }
}

fn model_for(preset: Option<Preset>, base: ModelConfig, num_classes: usize) -> ModelConfig {
    let mut m = match preset {
        Some(Preset::Desk) => ModelConfig::desk(num_classes),
        Some(Preset::Paper) => ModelConfig::default(),
        None => base,
    };
    m.num_fine_classes = num_classes;
    m
}

fn ensure_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        bail!(manet::Error::Config(format!("{} is not a directory", p.display())));
    }
    Ok(())
}

fn emit(report: &MetricsReport, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => write_report(p, report)?,
        None => print!("{}", canonical_json(report)?),
    }
    Ok(())
}

fn run_gen(a: GenArgs) -> Result<()> {
    let mut spec: GenSpec = load_config(a.config.as_deref(), "gen")?;
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.num_fine {
        spec.num_fine = v;
    }
    if let Some(v) = a.num_coarse {
        spec.num_coarse = v;
    }
    if let Some(v) = a.clips_per_class {
        spec.clips_per_class = v;
    }
    if a.long_tail.is_some() {
        spec.long_tail_exponent = a.long_tail;
    }
    if let Some(v) = a.raw_frames {
        spec.raw_frames = v;
    }
    if let Some(v) = a.side {
        spec.height = v;
        spec.width = v;
    }
    if a.emotions.is_some() {
        spec.emotion_classes = a.emotions;
        spec.actions_per_clip = Some(a.actions.unwrap_or([1, 4]));
    } else if a.actions.is_some() {
        spec.actions_per_clip = a.actions;
    }
    if let Some(v) = a.split {
        spec.split_ratio = v;
    }
    let summary = generate_dataset(&spec, &a.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn train_config(a: &TrainArgs, num_classes: usize) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = load_config(a.config.as_deref(), "train")?;
    cfg.model = model_for(a.preset, cfg.model, num_classes);
    if let Some(v) = a.seed {
        cfg.seed = v;
        cfg.model.init_seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = &a.lr_drops {
        cfg.lr_drop_epochs = v.clone();
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if a.beta.is_some() {
        bail!(manet::Error::Config("--beta applies to train-emotion only".into()));
    }
    Ok(cfg)
}

fn run_train(a: TrainArgs) -> Result<()> {
    ensure_dir(&a.data)?;
    let data = Dataset::open(&a.data)?;
    let cfg = train_config(&a, data.taxonomy.num_fine())?;
    write_canonical(&a.out.join("config.json"), &cfg)?;
    let out = train(&cfg, &data, &TrainOutput { dir: Some(a.out.clone()) })?;
    println!(
        "{}",
        json!({ "best_epoch": out.best_epoch, "val_f1_mean": out.best_val_f1_mean, "checkpoint": a.out.join("best.ckpt") })
    );
    Ok(())
}

fn finish_report(report: MetricsReport, percent: bool) -> Result<MetricsReport> {
    Ok(if percent { report.with_scale(Scale::Percent)? } else { report })
}

fn run_eval(a: EvalArgs) -> Result<()> {
    ensure_dir(&a.data)?;
    let data = Dataset::open(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    let ev = evaluate(&model, &data, a.split, a.frames)?;
    if let Some(p) = &a.predictions {
        manet::io::write_jsonl(p, &ev.predictions)?;
    }
    emit(&finish_report(ev.report, a.percent)?, a.report.as_deref())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let model = load_model(&a.checkpoint)?;
    let clip = load_clip_dir(&a.clip, a.fps)?;
    let p = predict(&model, &taxonomy, &clip, a.frames, a.top_k)?;
    println!("{}", serde_json::to_string_pretty(&p)?);
    Ok(())
}

fn run_metrics(a: MetricsArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let preds: Vec<PredictionRow> = manet::io::read_jsonl(&a.pred)?;
    let rows: Vec<ManifestRow> = manet::io::read_jsonl(&a.gt)?;
    let report = metrics_from_dump(&preds, &rows, &taxonomy)?;
    emit(&finish_report(report, a.percent)?, a.report.as_deref())
}

fn run_train_emotion(a: TrainArgs) -> Result<()> {
    ensure_dir(&a.data)?;
    let data = Dataset::open(&a.data)?;
    let mut cfg: EmotionConfig = load_config(a.config.as_deref(), "train-emotion")?;
    cfg.backbone = model_for(a.preset, cfg.backbone, data.taxonomy.num_fine());
    if let Some(v) = a.seed {
        cfg.seed = v;
        cfg.backbone.init_seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = &a.lr_drops {
        cfg.lr_drop_epochs = v.clone();
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if a.alpha.is_some() {
        bail!(manet::Error::Config("--alpha applies to the recognizer only".into()));
    }
    write_canonical(&a.out.join("config.json"), &cfg)?;
    let out = train_emotion(&cfg, &data, Some(&a.out))?;
    println!(
        "{}",
        json!({ "best_epoch": out.best_epoch, "val_score": out.best_val_score, "checkpoint": a.out.join("best.ckpt") })
    );
    Ok(())
}

fn run_eval_emotion(a: EvalArgs) -> Result<()> {
    ensure_dir(&a.data)?;
    let data = Dataset::open(&a.data)?;
    let model = load_emotion_model(&a.checkpoint)?;
    let ev = evaluate_emotion(&model, &data, a.split)?;
    if let Some(p) = &a.predictions {
        manet::io::write_jsonl(p, &ev.predictions)?;
    }
    emit(&finish_report(ev.report, a.percent)?, a.report.as_deref())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    ensure_dir(&a.train.data)?;
    let data = Dataset::open(&a.train.data)?;
    let cfg = train_config(&a.train, data.taxonomy.num_fine())?;
    let rows = alpha_sweep(&cfg, &data, &a.alphas)?;
    std::fs::create_dir_all(&a.train.out).with_context(|| format!("creating {}", a.train.out.display()))?;
    manet::io::write_jsonl(&a.train.out.join("sweep.jsonl"), &rows)?;
    let table = sweep_table(&rows);
    std::fs::write(a.train.out.join("sweep.txt"), &table)
        .with_context(|| format!("writing {}", a.train.out.display()))?;
    print!("{table}");
    Ok(())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<manet::Error>() {
        Some(e) => e.kind(),
        None => match err.downcast_ref::<std::io::Error>() {
            Some(_) => "io",
            None => "internal",
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Metrics(a) => run_metrics(a),
        Command::TrainEmotion(a) => run_train_emotion(a),
        Command::EvalEmotion(a) => run_eval_emotion(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = json!({ "error": { "kind": error_kind(&e), "message": format!("{e:#}") } });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
