//! `occgen` — scene generation, two-stage training, sampling and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or argument
//! error.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use occgen_core::checkpoint::{load_checkpoint, save_checkpoint};
use occgen_core::dataset::{load_dataset, prepare_clip, PreparedClip};
use occgen_core::diffusion::{pretrain_base, train_stage1, Model};
use occgen_core::metrics::{evaluate_generations, generate_all};
use occgen_core::rng;
use occgen_core::scene::{generate_synthetic_scene, load_scene, save_scene, CategoryTables};
use occgen_core::tensor::Tensor;
use occgen_core::{Config, Error};

const SEED_ENV: &str = "DDFX_SEED";

#[derive(Parser)]
#[command(name = "occgen", version, about = "Occupancy-conditioned driving video generation at desk scale")]
struct Cli {
    /// JSON config; unspecified fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedural scene clips as JSON files.
    GenScenes(GenScenes),
    /// Pretrain the base, freeze it, then stage 1: encoders, fusion and
    /// control branches.
    Train(Train),
    /// Stage 2: reward fine-tuning of low-rank adapters.
    FinetuneReward(Finetune),
    /// Render guided generations as PPM frames.
    Sample(Sample),
    /// Write a JSON metrics report.
    Eval(Eval),
}

#[derive(Args)]
struct GenScenes {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    /// Directory of scene files.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `train.base_steps`.
    #[arg(long)]
    base_steps: Option<usize>,
    /// Per-step stage-1 loss as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct Finetune {
    /// Stage-1 checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `reward.updates`.
    #[arg(long)]
    updates: Option<usize>,
    /// Per-update mean reward as CSV.
    #[arg(long)]
    reward_csv: Option<PathBuf>,
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A scene file or a directory of them.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Sampler steps (default `diffusion.sample_steps`).
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance scale (default `diffusion.cfg_scale`).
    #[arg(long)]
    cfg_scale: Option<f64>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

/// Bad arguments or configuration; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(usage(format!("{SEED_ENV}: {e}"))),
    }
}

fn read_config(path: &Path) -> Result<Config> {
    Config::load(path).map_err(|e| match e {
        Error::Io { .. } => anyhow::Error::new(e),
        other => usage(other.to_string()),
    })
}

/// Config from `--config` (or defaults), then `DDFX_SEED`, then validated.
fn resolve_config(path: Option<&Path>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => read_config(p).context("loading config")?,
        None => Config::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The checkpoint's embedded config is authoritative; only the seed follows
/// `DDFX_SEED`.
fn load_model(path: &Path) -> Result<Model> {
    let mut model = load_checkpoint(path).context("loading checkpoint")?;
    if let Some(s) = env_seed()? {
        model.config.seed = s;
    }
    Ok(model)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn scene_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let files = occgen_core::scene::scene_files(path)?;
        anyhow::ensure!(!files.is_empty(), "no scene files in {}", path.display());
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn load_clips(paths: &[PathBuf], cfg: &Config) -> Result<Vec<PreparedClip>> {
    paths
        .iter()
        .map(|p| Ok(prepare_clip(load_scene(p)?, cfg)?))
        .collect()
}

fn gen_scenes(cfg: &Config, a: &GenScenes) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be ≥ 1"));
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut seeds = rng::derive(seed, "scenes");
    for i in 0..a.count {
        let s: u64 = rand::Rng::random(&mut seeds);
        let clip = generate_synthetic_scene(s, &cfg.scene)?;
        save_scene(&a.out.join(format!("scene_{i:04}.json")), &clip)?;
    }
    eprintln!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn train(mut cfg: Config, a: &Train) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.base_steps {
        cfg.train.base_steps = s;
    }
    let data = load_dataset(&a.data, &cfg)?;
    let mut model = Model::init(&cfg, &CategoryTables::default())?;
    let every = (cfg.train.base_steps / 10).max(1);
    pretrain_base(&mut model, &data, |step, loss| {
        if step % every == 0 {
            eprintln!("base  {step:>6}  loss {loss:.5}");
        }
    })?;
    let every = (cfg.train.steps / 20).max(1);
    let report = train_stage1(&mut model, &data, |step, loss| {
        if step % every == 0 {
            eprintln!("step  {step:>6}  loss {loss:.5}");
        }
    })?;
    if let Some((first, last)) = report.initial_and_final(cfg.train.smoothing) {
        eprintln!("smoothed loss {first:.5} -> {last:.5}");
    }
    if let Some(p) = &a.loss_csv {
        write_file(p, report.to_csv().as_bytes())?;
    }
    save_checkpoint(&a.out, &model)?;
    Ok(())
}

fn finetune(file_cfg: Option<Config>, a: &Finetune) -> Result<()> {
    let mut model = load_model(&a.checkpoint)?;
    // A supplied config contributes only its reward section.
    if let Some(c) = file_cfg {
        model.config.reward = c.reward;
    }
    if let Some(u) = a.updates {
        model.config.reward.updates = u;
    }
    model.config.validate()?;
    let data = load_dataset(&a.data, &model.config)?;
    let every = (model.config.reward.updates / 20).max(1);
    let report = occgen_core::reward::train_stage2(&mut model, &data, |u, r| {
        if u % every == 0 {
            eprintln!("update {u:>5}  reward {r:.5}");
        }
    })?;
    if let Some(p) = &a.reward_csv {
        write_file(p, report.to_csv().as_bytes())?;
    }
    save_checkpoint(&a.out, &model)?;
    Ok(())
}

/// Binary PPM of one `[U, V, 3]` frame, values clamped to [0, 1].
fn ppm(frame: &[f64], u: usize, v: usize) -> Vec<u8> {
    let mut out = format!("P6\n{v} {u}\n255\n").into_bytes();
    out.extend(frame.iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn sample(a: &Sample) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let cfg = &model.config;
    let steps = a.steps.unwrap_or(cfg.diffusion.sample_steps);
    if steps == 0 || steps > cfg.diffusion.steps {
        return Err(usage(format!("--steps must lie in [1, {}]", cfg.diffusion.steps)));
    }
    let scale = a.cfg_scale.unwrap_or(cfg.diffusion.cfg_scale);
    let seed = a.seed.unwrap_or(cfg.seed);
    let paths = scene_paths(&a.scenes)?;
    let clips = load_clips(&paths, cfg)?;
    let videos = generate_all(&model, &clips, steps, scale, seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (path, video) in paths.iter().zip(&videos) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
        write_frames(&a.out, stem, video)?;
    }
    eprintln!("wrote {} clips to {}", videos.len(), a.out.display());
    Ok(())
}

fn write_frames(dir: &Path, stem: &str, video: &Tensor) -> Result<()> {
    let s = video.shape();
    let (u, v) = (s[1], s[2]);
    for (k, frame) in video.data().chunks(u * v * 3).enumerate() {
        write_file(&dir.join(format!("{stem}_f{k}.ppm")), &ppm(frame, u, v))?;
    }
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let cfg = &model.config;
    let seed = a.seed.unwrap_or(cfg.seed);
    let clips = load_clips(&scene_paths(&a.scenes)?, cfg)?;
    let (steps, scale) = (cfg.diffusion.sample_steps, cfg.diffusion.cfg_scale);
    let generated = generate_all(&model, &clips, steps, scale, seed)?;
    let report = evaluate_generations(&model, &clips, &generated, steps, scale, seed)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_file(&a.out, json.as_bytes())?;
    eprintln!(
        "fid {:.4}  fvd {:.4}  iou {:.4}  composite {:.4}",
        report.fid, report.fvd, report.controllability_iou, report.composite_score
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = cli.config.as_deref().map(read_config).transpose().context("loading config")?;
    match &cli.command {
        Command::GenScenes(a) => gen_scenes(&resolve_config(cli.config.as_deref())?, a),
        Command::Train(a) => train(resolve_config(cli.config.as_deref())?, a),
        Command::FinetuneReward(a) => finetune(file_cfg, a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>() || matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. }))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
