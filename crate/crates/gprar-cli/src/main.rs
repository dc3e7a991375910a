//! Command-line driver: corpus generation, both training stages, evaluation,
//! and the ablation/occlusion studies, one subcommand each.
//!
//! Conventions shared by every subcommand:
//! - settings resolve as flags, then `--config` file entries, then defaults;
//! - `--out` falls back to `$GPRAR_OUT/<command>` when unset;
//! - exit code 0 on success, 2 for usage problems, 1 for runtime failures;
//! - stdout carries one machine-readable JSON summary line, stderr the
//!   diagnostics;
//! - the output directory gets a `run.json` manifest, written atomically,
//!   from which the run can be replayed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use gprar_core::eval::{
    ablation_grid, occlusion_sweep, run_eval, EvalMode, Predictor, KNN_K_DEFAULT,
};
use gprar_core::fa::{parse_streams, FAConfig, FAModel, StreamKind};
use gprar_core::prar::{PRARConfig, PRARModel};
use gprar_core::skeleton::build_layout;
use gprar_core::synth::{gen_corpus, parse_mix, Corpus, ScenarioConfig};
use gprar_core::tensor::load_checkpoint;
use gprar_core::train::{pretrain_prar, train_full, warm_start, Split, TrainConfig};

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "gprar", version, about = "Pose-graph pedestrian trajectory pipeline")]
struct Cli {
    /// Cap the worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Stage 1: train the pose model on reconstruction + recognition.
    Pretrain(PretrainArgs),
    /// Stage 2: train the full prediction pipeline.
    Train(TrainArgs),
    /// Score a predictor on a corpus split.
    Eval(EvalArgs),
    /// Re-mask observations across occlusion ratios and compare variants.
    Sweep(SweepArgs),
    /// Train and score one aggregator variant per feature subset.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory (default: $GPRAR_OUT/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with defaults for any flag of this subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for data, initialization, and batch order.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Action mix, e.g. `walking=0.5,standing=0.5`; weights sum to 1.
    #[arg(long)]
    mix: Option<String>,
    /// Skeleton preset (`coco18` or `toy5`).
    #[arg(long)]
    layout: Option<String>,
    /// Fraction of joints masked per frame.
    #[arg(long)]
    occlusion: Option<f64>,
    /// Gaussian keypoint noise in pixels.
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    image_width: Option<usize>,
    #[arg(long)]
    image_height: Option<usize>,
    /// Observed frames per sample.
    #[arg(long)]
    t_obs: Option<usize>,
    /// Future frames per sample.
    #[arg(long)]
    t_pred: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    training: TrainFlags,
    /// Corpus directory.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Action classes the recognition head distinguishes.
    #[arg(long)]
    classes: Option<usize>,
    /// Checkpoint to start from instead of random initialization.
    #[arg(long)]
    warm_start: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    training: TrainFlags,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Stage-1 checkpoint for the pose model.
    #[arg(long)]
    prar_checkpoint: Option<PathBuf>,
    /// Start the pose model untrained instead (prints a warning).
    #[arg(long, conflicts_with = "prar_checkpoint")]
    no_pretrain: bool,
    /// Let prediction gradients update the pose model (the default).
    #[arg(long, conflicts_with = "frozen")]
    adaptive: bool,
    /// Keep the pose model fixed during stage 2.
    #[arg(long)]
    frozen: bool,
    /// Aggregator input streams, e.g. `X+XR+PR+C+A`.
    #[arg(long)]
    streams: Option<String>,
    /// Predict offsets from the last observed location.
    #[arg(long)]
    offset_mode: bool,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// `gprar` or `const-vel`.
    #[arg(long)]
    predictor: Option<String>,
    /// Observation mode: `noisy`, `preprocessed`, or `complete`.
    #[arg(long)]
    mode: Option<String>,
    /// Corpus split to score: `train` or `val`.
    #[arg(long)]
    split: Option<String>,
    /// Neighbor count for `preprocessed` imputation.
    #[arg(long)]
    knn_k: Option<usize>,
    /// Stage-2 output directory holding checkpoints and model configs.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    training: TrainFlags,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Training output directory holding the pose checkpoint and config.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Use an untrained pose model instead (prints a warning).
    #[arg(long, conflicts_with = "model")]
    no_pretrain: bool,
    /// Predict offsets from the last observed location.
    #[arg(long)]
    offset_mode: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Occlusion ratios, e.g. `0,0.25,0.5`.
    #[arg(long)]
    ratios: Option<String>,
    /// Aggregator variants, e.g. `X+P,X+P+C,XR+PR+C`.
    #[arg(long)]
    variants: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Feature subsets, e.g. `XR,XR+C`.
    #[arg(long)]
    subsets: Option<String>,
}

// ---------------------------------------------------------------------------
// Config files and flag resolution
// ---------------------------------------------------------------------------

/// Every overridable setting a `--config` file may provide. One flat schema
/// serves all subcommands; unknown keys are rejected to catch typos.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    out: Option<PathBuf>,
    seed: Option<u64>,
    n: Option<usize>,
    mix: Option<String>,
    layout: Option<String>,
    occlusion: Option<f64>,
    jitter: Option<f64>,
    image_width: Option<usize>,
    image_height: Option<usize>,
    t_obs: Option<usize>,
    t_pred: Option<usize>,
    corpus: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    decay_factor: Option<f64>,
    decay_every: Option<usize>,
    batch: Option<usize>,
    classes: Option<usize>,
    warm_start: Option<PathBuf>,
    prar_checkpoint: Option<PathBuf>,
    adaptive: Option<bool>,
    streams: Option<String>,
    offset_mode: Option<bool>,
    predictor: Option<String>,
    mode: Option<String>,
    split: Option<String>,
    knn_k: Option<usize>,
    model: Option<PathBuf>,
    ratios: Option<String>,
    variants: Option<String>,
    subsets: Option<String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| usage(format!("config file {}: {e}", path.display())))
    }
}

/// A problem with how the command was invoked, as opposed to a failure while
/// running it; mapped to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn resolve_out(flag: Option<PathBuf>, file: Option<PathBuf>, command: &str) -> Result<PathBuf> {
    if let Some(path) = flag.or(file) {
        return Ok(path);
    }
    match std::env::var_os("GPRAR_OUT") {
        Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(command)),
        _ => Err(usage(format!("{command}: --out is required (or set GPRAR_OUT)"))),
    }
}

fn required(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| usage(format!("--{flag} is required")))
}

fn resolved_train_config(flags: &TrainFlags, file: &FileConfig, adaptive: bool, seed: u64) -> TrainConfig {
    let defaults = TrainConfig::default();
    TrainConfig {
        epochs: flags.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        lr0: flags.lr.or(file.lr).unwrap_or(defaults.lr0),
        decay_factor: flags.decay_factor.or(file.decay_factor).unwrap_or(defaults.decay_factor),
        decay_every: flags.decay_every.or(file.decay_every).unwrap_or(defaults.decay_every),
        batch_size: flags.batch.or(file.batch).unwrap_or(defaults.batch_size),
        adaptive,
        rng_seed: seed,
    }
}

fn train_config_json(cfg: &TrainConfig) -> serde_json::Value {
    json!({
        "epochs": cfg.epochs,
        "lr": cfg.lr0,
        "decay_factor": cfg.decay_factor,
        "decay_every": cfg.decay_every,
        "batch": cfg.batch_size,
        "adaptive": cfg.adaptive,
    })
}

// ---------------------------------------------------------------------------
// Model plumbing
// ---------------------------------------------------------------------------

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn base_scenario(corpus: &Corpus) -> Result<&ScenarioConfig> {
    Ok(&corpus.samples.first().context("corpus has no samples")?.config)
}

/// Pose-model architecture sized for the corpus: the toy preset for `toy5`
/// corpora, the full-size one otherwise, with horizons and frame size taken
/// from the data.
fn prar_config_for(corpus: &Corpus, classes: usize) -> Result<PRARConfig> {
    let base = base_scenario(corpus)?;
    let image = (base.image_size.0 as f64, base.image_size.1 as f64);
    let mut config = match base.layout_preset.as_str() {
        "toy5" => PRARConfig::toy(classes),
        _ => PRARConfig::standard(classes, image),
    };
    config.image_size = image;
    config.t_obs = base.t_obs;
    Ok(config)
}

/// Aggregator architecture matched to the corpus and a pose-model config.
fn fa_config_for(
    corpus: &Corpus,
    streams: Vec<StreamKind>,
    prar: &PRARConfig,
    offset_mode: bool,
) -> Result<FAConfig> {
    let base = base_scenario(corpus)?;
    let image = (base.image_size.0 as f64, base.image_size.1 as f64);
    let joints = build_layout(&base.layout_preset)?.joint_count();
    let mut config = match base.layout_preset.as_str() {
        "toy5" => FAConfig::toy(streams, prar.action_channels()),
        _ => FAConfig::standard(streams, joints, prar.action_channels(), image),
    };
    config.t_obs = base.t_obs;
    config.t_pred = base.t_pred;
    config.image_size = image;
    config.offset_mode = offset_mode;
    Ok(config)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Restores the pose model from a training output directory (either stage's).
fn load_prar(dir: &Path) -> Result<PRARModel> {
    let config: PRARConfig = read_json(&dir.join("prar_config.json"))?;
    let mut model = PRARModel::new(config, 0)?;
    let checkpoint = ["checkpoint_prar.json", "checkpoint_final.json"]
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.exists())
        .ok_or_else(|| anyhow!("no pose checkpoint found in {}", dir.display()))?;
    let loaded = load_checkpoint(&checkpoint)?;
    model.params_mut().copy_matching(&loaded, |_| false)?;
    Ok(model)
}

/// Restores the aggregator from a stage-2 output directory.
fn load_fa(dir: &Path) -> Result<FAModel> {
    let config: FAConfig = read_json(&dir.join("fa_config.json"))?;
    let mut model = FAModel::new(config, 0)?;
    let loaded = load_checkpoint(&dir.join("checkpoint_fa.json"))?;
    model.params_mut().copy_matching(&loaded, |_| false)?;
    Ok(model)
}

/// The pose model for a study command: restored from `--model`, or fresh
/// with a warning under `--no-pretrain`.
fn study_prar(study: &StudyArgs, file: &FileConfig, corpus: &Corpus, seed: u64) -> Result<PRARModel> {
    match study.model.clone().or_else(|| file.model.clone()) {
        Some(dir) => load_prar(&dir),
        None if study.no_pretrain => {
            eprintln!("warning: using an untrained pose model; its streams carry no learned signal");
            Ok(PRARModel::new(prar_config_for(corpus, 4)?, seed)?)
        }
        None => Err(usage("provide --model or opt out with --no-pretrain")),
    }
}

fn parse_subset_list(expr: &str) -> Result<Vec<Vec<StreamKind>>> {
    expr.split(',')
        .map(|s| parse_streams(s).map_err(|e| usage(e.to_string())))
        .collect()
}

fn parse_ratio_list(expr: &str) -> Result<Vec<f64>> {
    expr.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("occlusion ratio '{}' is not a number", s.trim())))
        })
        .collect()
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(usage(format!("unknown split '{other}' (use train or val)"))),
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Writes `run.json` atomically: everything needed to replay the command,
/// plus the artifacts it produced and how long it took.
fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    outputs: &[&str],
    started: Instant,
) -> Result<()> {
    let manifest = json!({
        "command": command,
        "build": format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        "rng_seed": seed,
        "config": config,
        "outputs": outputs,
        "duration_ms": started.elapsed().as_millis() as u64,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let tmp = dir.join("run.json.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, dir.join("run.json"))?;
    Ok(())
}

fn emit(summary: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let started = Instant::now();
    let file = FileConfig::load(args.common.config.as_deref())?;
    let out = resolve_out(args.common.out.clone(), file.out.clone(), "synth")?;
    let n = args.n.or(file.n).ok_or_else(|| usage("--n is required"))?;
    let seed = args.common.seed.or(file.seed).unwrap_or(0);
    let mix_expr = args
        .mix
        .or(file.mix)
        .unwrap_or_else(|| "walking=0.25,standing=0.25,bending=0.25,running=0.25".to_string());
    let mix = parse_mix(&mix_expr).map_err(|e| usage(e.to_string()))?;

    let defaults = ScenarioConfig::default();
    let layout_preset = args.layout.or(file.layout).unwrap_or(defaults.layout_preset.clone());
    build_layout(&layout_preset).map_err(|e| usage(e.to_string()))?;
    let base = ScenarioConfig {
        layout_preset,
        occlusion_ratio: args.occlusion.or(file.occlusion).unwrap_or(defaults.occlusion_ratio),
        jitter_sigma: args.jitter.or(file.jitter).unwrap_or(defaults.jitter_sigma),
        image_size: (
            args.image_width.or(file.image_width).unwrap_or(defaults.image_size.0),
            args.image_height.or(file.image_height).unwrap_or(defaults.image_size.1),
        ),
        t_obs: args.t_obs.or(file.t_obs).unwrap_or(defaults.t_obs),
        t_pred: args.t_pred.or(file.t_pred).unwrap_or(defaults.t_pred),
        ..defaults
    };
    let corpus = gen_corpus(n, &mix, &base, seed)?;
    corpus.save(&out)?;

    let config = json!({
        "n": n,
        "mix": mix_expr,
        "layout": base.layout_preset,
        "occlusion": base.occlusion_ratio,
        "jitter": base.jitter_sigma,
        "image_size": [base.image_size.0, base.image_size.1],
        "t_obs": base.t_obs,
        "t_pred": base.t_pred,
    });
    write_manifest(&out, "synth", seed, config, &["manifest.json"], started)?;
    emit(json!({
        "out": out,
        "samples": corpus.samples.len(),
        "train": corpus.train_indices.len(),
        "val": corpus.val_indices.len(),
    }))
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let started = Instant::now();
    let file = FileConfig::load(args.common.config.as_deref())?;
    let out = resolve_out(args.common.out.clone(), file.out.clone(), "pretrain")?;
    let corpus_dir = required(args.corpus.or(file.corpus.clone()), "corpus")?;
    let seed = args.common.seed.or(file.seed).unwrap_or(0);
    let classes = args.classes.or(file.classes).unwrap_or(4);
    let cfg = resolved_train_config(&args.training, &file, true, seed);

    let corpus = load_corpus(&corpus_dir)?;
    let mut model = PRARModel::new(prar_config_for(&corpus, classes)?, seed)?;
    let warm = args.warm_start.or(file.warm_start);
    if let Some(ref checkpoint) = warm {
        let skipped = warm_start(&mut model, checkpoint)?;
        if !skipped.is_empty() {
            eprintln!(
                "note: checkpoint head does not fit {classes} classes; reinitialized {}",
                skipped.join(", ")
            );
        }
    }
    let report = pretrain_prar(&mut model, &corpus, &cfg, Some(&out))?;
    write_json(&out.join("prar_config.json"), model.config())?;

    let mut config = train_config_json(&cfg);
    config["corpus"] = json!(corpus_dir);
    config["classes"] = json!(classes);
    config["warm_start"] = json!(warm);
    let outputs =
        ["curve.csv", "curve.svg", "checkpoint_final.json", "checkpoint_best.json", "prar_config.json"];
    write_manifest(&out, "pretrain", seed, config, &outputs, started)?;
    emit(json!({
        "out": out,
        "final_train_loss": report.final_train_loss(),
        "final_val_loss": report.final_val_loss(),
        "best_epoch": report.best_epoch,
    }))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let file = FileConfig::load(args.common.config.as_deref())?;
    let out = resolve_out(args.common.out.clone(), file.out.clone(), "train")?;
    let corpus_dir = required(args.corpus.or(file.corpus.clone()), "corpus")?;
    let seed = args.common.seed.or(file.seed).unwrap_or(0);
    let classes = args.classes.or(file.classes).unwrap_or(4);
    let adaptive = if args.frozen {
        false
    } else if args.adaptive {
        true
    } else {
        file.adaptive.unwrap_or(TrainConfig::default().adaptive)
    };
    let offset_mode = args.offset_mode || file.offset_mode.unwrap_or(false);
    let streams_expr =
        args.streams.or(file.streams.clone()).unwrap_or_else(|| "X+XR+PR+C+A".to_string());
    let streams = parse_streams(&streams_expr).map_err(|e| usage(e.to_string()))?;
    let cfg = resolved_train_config(&args.training, &file, adaptive, seed);

    let corpus = load_corpus(&corpus_dir)?;
    let mut prar = PRARModel::new(prar_config_for(&corpus, classes)?, seed)?;
    let prar_checkpoint = args.prar_checkpoint.or(file.prar_checkpoint);
    match prar_checkpoint {
        Some(ref checkpoint) => {
            let skipped = warm_start(&mut prar, checkpoint)?;
            if !skipped.is_empty() {
                eprintln!(
                    "note: checkpoint head does not fit {classes} classes; reinitialized {}",
                    skipped.join(", ")
                );
            }
        }
        None if args.no_pretrain => {
            eprintln!("warning: pose model starts untrained; run pretrain first for useful streams");
        }
        None => return Err(usage("provide --prar-checkpoint or opt out with --no-pretrain")),
    }
    let mut fa = FAModel::new(fa_config_for(&corpus, streams, prar.config(), offset_mode)?, seed)?;
    let report = train_full(&mut prar, &mut fa, &corpus, &cfg, Some(&out))?;
    write_json(&out.join("prar_config.json"), prar.config())?;
    write_json(&out.join("fa_config.json"), fa.config())?;

    let mut config = train_config_json(&cfg);
    config["corpus"] = json!(corpus_dir);
    config["classes"] = json!(classes);
    config["streams"] = json!(streams_expr);
    config["offset_mode"] = json!(offset_mode);
    config["prar_checkpoint"] = json!(prar_checkpoint);
    let outputs = [
        "curve.csv",
        "curve.svg",
        "checkpoint_prar.json",
        "checkpoint_fa.json",
        "prar_config.json",
        "fa_config.json",
    ];
    write_manifest(&out, "train", seed, config, &outputs, started)?;
    emit(json!({
        "out": out,
        "adaptive": adaptive,
        "final_train_loss": report.final_train_loss(),
        "final_val_loss": report.final_val_loss(),
    }))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let file = FileConfig::load(args.common.config.as_deref())?;
    let out = resolve_out(args.common.out.clone(), file.out.clone(), "eval")?;
    let corpus_dir = required(args.corpus.or(file.corpus.clone()), "corpus")?;
    let seed = args.common.seed.or(file.seed).unwrap_or(0);
    let predictor_name = args.predictor.or(file.predictor).unwrap_or_else(|| "gprar".to_string());
    let mode_name = args.mode.or(file.mode).unwrap_or_else(|| "noisy".to_string());
    let split_name = args.split.or(file.split).unwrap_or_else(|| "val".to_string());
    let knn_k = args.knn_k.or(file.knn_k).unwrap_or(KNN_K_DEFAULT);
    let mode = EvalMode::parse(&mode_name).map_err(|e| usage(e.to_string()))?;
    let split = parse_split(&split_name)?;

    let corpus = load_corpus(&corpus_dir)?;
    let model_dir = args.model.or(file.model.clone());
    let models = match predictor_name.as_str() {
        "const-vel" | "const_vel" => None,
        "gprar" => {
            let dir = model_dir.clone().ok_or_else(|| usage("--model is required for gprar"))?;
            let prar = load_prar(&dir)?;
            let fa = load_fa(&dir)?;
            Some((prar, fa))
        }
        other => return Err(usage(format!("unknown predictor '{other}' (use gprar or const-vel)"))),
    };
    let predictor = match models {
        Some((ref prar, ref fa)) => Predictor::Gprar { prar, fa },
        None => Predictor::ConstVel,
    };
    let report = run_eval(predictor, &corpus, split, mode, knn_k, Some(&out))?;

    let config = json!({
        "corpus": corpus_dir,
        "predictor": predictor_name,
        "mode": mode_name,
        "split": split_name,
        "knn_k": knn_k,
        "model": model_dir,
    });
    write_manifest(&out, "eval", seed, config, &["report.csv"], started)?;
    emit(json!({
        "out": out,
        "rows": report.rows.len(),
        "mean_ade": report.mean_ade(),
        "mean_fde": report.mean_fde(),
    }))
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let started = Instant::now();
    let study = &args.study;
    let file = FileConfig::load(study.common.config.as_deref())?;
    let out = resolve_out(study.common.out.clone(), file.out.clone(), "sweep")?;
    let corpus_dir = required(study.corpus.clone().or(file.corpus.clone()), "corpus")?;
    let seed = study.common.seed.or(file.seed).unwrap_or(0);
    let ratios_expr = args.ratios.or(file.ratios.clone()).unwrap_or_else(|| "0,0.25,0.5".to_string());
    let variants_expr = args
        .variants
        .or(file.variants.clone())
        .unwrap_or_else(|| "X+P,X+P+C,XR+PR+C".to_string());
    let ratios = parse_ratio_list(&ratios_expr)?;
    let variants = parse_subset_list(&variants_expr)?;
    let offset_mode = study.offset_mode || file.offset_mode.unwrap_or(false);
    let cfg = resolved_train_config(&study.training, &file, false, seed);

    let corpus = load_corpus(&corpus_dir)?;
    let prar = study_prar(study, &file, &corpus, seed)?;
    let fa_base = fa_config_for(&corpus, StreamKind::ALL.to_vec(), prar.config(), offset_mode)?;
    let table = occlusion_sweep(&prar, &fa_base, &corpus, &variants, &ratios, &cfg, Some(&out))?;

    let mut config = train_config_json(&cfg);
    config["corpus"] = json!(corpus_dir);
    config["ratios"] = json!(ratios_expr);
    config["variants"] = json!(variants_expr);
    config["model"] = json!(study.model.clone().or(file.model.clone()));
    config["offset_mode"] = json!(offset_mode);
    write_manifest(&out, "sweep", seed, config, &["sweep.csv", "sweep.svg"], started)?;
    emit(json!({ "out": out, "rows": table.rows.len() }))
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let started = Instant::now();
    let study = &args.study;
    let file = FileConfig::load(study.common.config.as_deref())?;
    let out = resolve_out(study.common.out.clone(), file.out.clone(), "ablate")?;
    let corpus_dir = required(study.corpus.clone().or(file.corpus.clone()), "corpus")?;
    let seed = study.common.seed.or(file.seed).unwrap_or(0);
    let subsets_expr = args
        .subsets
        .or(file.subsets.clone())
        .unwrap_or_else(|| "X,XR,XR+C,XR+PR+C,XR+PR+C+A,X+XR+PR+C+A".to_string());
    let subsets = parse_subset_list(&subsets_expr)?;
    let offset_mode = study.offset_mode || file.offset_mode.unwrap_or(false);
    let cfg = resolved_train_config(&study.training, &file, false, seed);

    let corpus = load_corpus(&corpus_dir)?;
    let prar = study_prar(study, &file, &corpus, seed)?;
    let fa_base = fa_config_for(&corpus, StreamKind::ALL.to_vec(), prar.config(), offset_mode)?;
    let table = ablation_grid(&prar, &fa_base, &corpus, &subsets, &cfg, Some(&out))?;

    let mut config = train_config_json(&cfg);
    config["corpus"] = json!(corpus_dir);
    config["subsets"] = json!(subsets_expr);
    config["model"] = json!(study.model.clone().or(file.model.clone()));
    config["offset_mode"] = json!(offset_mode);
    write_manifest(&out, "ablate", seed, config, &["ablation.csv"], started)?;
    emit(json!({ "out": out, "rows": table.rows.len() }))
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            if err.downcast_ref::<Usage>().is_some() {
                eprintln!("usage error: {err}");
                2
            } else {
                eprintln!("error: {err:#}");
                1
            }
        }
    };
    std::process::exit(code);
}
