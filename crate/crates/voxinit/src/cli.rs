//! Command-line interface: dataset generation, the two training steps,
//! evaluation, inference, and initializer statistics.
//!
//! Every subcommand accepts `--config FILE` with `key=value` lines;
//! explicit flags win over file values. Exit codes: 0 success, 1 usage or
//! configuration, 2 data/format, 3 numerical failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::dataio::{
    load_dataset, normalize, read_volume, split_indices, write_dataset, write_volume, SynthSpec,
    VolumeSample,
};
use crate::error::{Result, VoxError};
use crate::init::{self, InitSpec, LayerKind, Scheme};
use crate::model::{ModelConfig, Stage};
use crate::pipeline::{
    evaluate, finetune_model, load_checkpoint, pretrain_model, sliding_window_infer, train_step1,
    train_step2, write_eval, InitSource, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "voxinit",
    version,
    about = "Self-supervised weight initialization for volumetric segmentation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic ellipsoid dataset.
    GenData(GenDataArgs),
    /// Step 1: self-supervised pretraining on the training split.
    Pretrain(PretrainArgs),
    /// Step 2: supervised fine-tuning, optionally from a step-1 checkpoint.
    Finetune(FinetuneArgs),
    /// Dice evaluation of a checkpoint over a dataset split.
    Evaluate(EvaluateArgs),
    /// Predict labels for a single volume file.
    Infer(InferArgs),
    /// Sample statistics of an initialization scheme.
    InitStats(InitStatsArgs),
}

/// Run the CLI against `argv`; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Finetune(a) => finetune(a),
        Cmd::Evaluate(a) => run_evaluate(a),
        Cmd::Infer(a) => infer(a),
        Cmd::InitStats(a) => init_stats(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                VoxError::Usage(_) | VoxError::Config(_) => 1,
                VoxError::Format { .. } | VoxError::Io(_) | VoxError::Shape(_) => 2,
                VoxError::Numerical(_) => 3,
            }
        }
    }
}

// ---- config-file merging ----

#[derive(Debug)]
struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    VoxError::usage(format!(
                        "{}:{}: expected key=value, got '{raw}'",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                values.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        Ok(FileConfig { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                VoxError::usage(format!("config key {key}: cannot parse '{raw}': {e}"))
            }),
        }
    }
}

fn pick<T: FromStr>(flag: Option<T>, cfg: &FileConfig, key: &str, default: T) -> Result<T>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => v,
        None => cfg.get(key)?.unwrap_or(default),
    })
}

fn pick_path(flag: Option<PathBuf>, cfg: &FileConfig, key: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => cfg.get::<PathBuf>(key)?.ok_or_else(|| {
            VoxError::usage(format!("--{} is required", key.replace('_', "-")))
        }),
    }
}

/// Seed precedence: flag, then config file, then VOXINIT_SEED, then default.
fn pick_seed(flag: Option<u64>, cfg: &FileConfig, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = cfg.get("seed")? {
        return Ok(s);
    }
    match std::env::var("VOXINIT_SEED") {
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|e| VoxError::usage(format!("VOXINIT_SEED '{raw}' is not a u64: {e}"))),
        Err(_) => Ok(default),
    }
}

fn parse_list(raw: &str, what: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| VoxError::usage(format!("{what} '{raw}': {e}")))
        })
        .collect()
}

fn parse_dims(raw: &str) -> Result<[usize; 3]> {
    let v = parse_list(raw, "dims")?;
    if v.len() != 3 {
        return Err(VoxError::usage(format!(
            "dims must be three comma-separated integers, got '{raw}'"
        )));
    }
    Ok([v[0], v[1], v[2]])
}

fn parse_range(raw: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    let bad = || VoxError::usage(format!("radius must be LO,HI, got '{raw}'"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let lo = parts[0].parse().map_err(|_| bad())?;
    let hi = parts[1].parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

// ---- model geometry ----

#[derive(Args, Clone)]
struct GeometryArgs {
    /// Token patch edge (power of two).
    #[arg(long)]
    patch: Option<usize>,
    /// Embedding width.
    #[arg(long)]
    embed: Option<usize>,
    /// Tapped encoder levels m.
    #[arg(long)]
    levels: Option<usize>,
    /// Transformer block count.
    #[arg(long)]
    depth: Option<usize>,
    /// Attention heads per block.
    #[arg(long)]
    attn_heads: Option<usize>,
    /// Block MLP hidden width, as a multiple of the embedding.
    #[arg(long)]
    mlp_ratio: Option<usize>,
    /// Comma-separated decoder widths, deepest first (one per 2x stage).
    #[arg(long)]
    dec_channels: Option<String>,
}

fn build_model_cfg(geo: &GeometryArgs, cfg: &FileConfig, base: ModelConfig) -> Result<ModelConfig> {
    let mut m = base;
    m.patch = pick(geo.patch, cfg, "patch", m.patch)?;
    m.embed = pick(geo.embed, cfg, "embed", m.embed)?;
    m.levels = pick(geo.levels, cfg, "levels", m.levels)?;
    m.depth = pick(geo.depth, cfg, "depth", m.depth)?;
    m.heads = pick(geo.attn_heads, cfg, "attn_heads", m.heads)?;
    m.mlp_ratio = pick(geo.mlp_ratio, cfg, "mlp_ratio", m.mlp_ratio)?;
    let dec_raw: Option<String> = match geo.dec_channels.clone() {
        Some(v) => Some(v),
        None => cfg.get("dec_channels")?,
    };
    let stages = m.patch.max(2).trailing_zeros() as usize;
    m.dec_channels = match dec_raw {
        Some(raw) => parse_list(&raw, "dec-channels")?,
        // Keep the base widths when they still fit the stage count;
        // otherwise fall back to a halving ladder ending at 8.
        None if m.dec_channels.len() == stages => m.dec_channels,
        None => (0..stages).map(|s| 8usize << (stages - 1 - s)).collect(),
    };
    m.validate()?;
    Ok(m)
}

// ---- subcommands ----

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of volumes.
    #[arg(long)]
    n: Option<usize>,
    /// Volume extents H,W,D.
    #[arg(long)]
    dims: Option<String>,
    /// Class count J, background included.
    #[arg(long)]
    classes: Option<usize>,
    /// Ellipsoid radius range LO,HI in voxels.
    #[arg(long)]
    radius: Option<String>,
    /// Additive per-voxel noise sigma.
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let out = pick_path(a.out, &cfg, "out")?;
    let n = pick(a.n, &cfg, "n", 10)?;
    let dims_raw = pick(a.dims, &cfg, "dims", "32,32,32".to_string())?;
    let dims = parse_dims(&dims_raw)?;
    let classes = pick(a.classes, &cfg, "classes", 4)?;
    let seed = pick_seed(a.seed, &cfg, 7)?;

    let mut spec = SynthSpec::balanced(dims, classes, seed);
    if let Some(raw) = a.radius.or(cfg.get("radius")?) {
        spec.radius_range = parse_range(&raw)?;
    }
    spec.noise_std = pick(a.noise_std, &cfg, "noise_std", spec.noise_std)?;

    let manifest = write_dataset(&out, &spec, n)?;
    println!(
        "wrote {} volumes of {:?} with {} classes to {}",
        manifest.files.len(),
        dims,
        classes,
        out.display()
    );
    Ok(())
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint and metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of masked sub-patches in [0, 1].
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Masking patch edge in voxels.
    #[arg(long)]
    mask_patch: Option<usize>,
    /// Comma-separated 1-based order-head levels, e.g. 1,2,3,4.
    #[arg(long)]
    heads: Option<String>,
    /// Initialization scheme applied before self-supervision.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    geo: GeometryArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_split(dir: &Path) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>, usize)> {
    let (manifest, samples) = load_dataset(dir)?;
    let (train_idx, val_idx) = split_indices(samples.len());
    let mut train = Vec::with_capacity(train_idx.len());
    let mut val = Vec::with_capacity(val_idx.len());
    for (i, s) in samples.into_iter().enumerate() {
        if train_idx.contains(&i) {
            train.push(s);
        } else if val_idx.contains(&i) {
            val.push(s);
        }
    }
    Ok((train, val, manifest.classes))
}

fn dataset_model_cfg(dir: &Path, geo: &GeometryArgs, cfg: &FileConfig) -> Result<ModelConfig> {
    let manifest = crate::dataio::read_manifest(dir)?;
    let base = ModelConfig::desk(1, manifest.dims, manifest.classes);
    build_model_cfg(geo, cfg, base)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let data = pick_path(a.data, &cfg, "data")?;
    let out = pick_path(a.out, &cfg, "out")?;
    let mcfg = dataset_model_cfg(&data, &a.geo, &cfg)?;

    let mut run = RunConfig::default();
    run.seed = pick_seed(a.seed, &cfg, 0)?;
    run.step1.epochs = pick(a.epochs, &cfg, "epochs", run.step1.epochs)?;
    run.step1.lr = pick(a.lr, &cfg, "lr", run.step1.lr)?;
    run.step1.mask_ratio = pick(a.mask_ratio, &cfg, "mask_ratio", run.step1.mask_ratio)?;
    run.step1.mask_patch = pick(a.mask_patch, &cfg, "mask_patch", run.step1.mask_patch)?;
    run.step1.scheme = pick(a.scheme, &cfg, "scheme", run.step1.scheme.clone())?;
    run.step1.heads_used = match a.heads.or(cfg.get("heads")?) {
        Some(raw) => parse_list(&raw, "heads")?,
        None => (1..=mcfg.levels).collect(),
    };

    let (train, _, _) = load_split(&data)?;
    let mut model = pretrain_model(&mcfg, &run)?;
    let art = train_step1(&train, &mut model, &run)?;

    std::fs::create_dir_all(&out)?;
    let ckpt_path = out.join("pretrained.vwi");
    std::fs::write(&ckpt_path, art.checkpoint.to_bytes())?;
    std::fs::write(out.join("pretrain_metrics.csv"), &art.csv)?;
    let last = art.history.last().expect("at least one epoch");
    println!(
        "pretrained {} epochs on {} volumes; final L_cls={:.6} L_rec={:.6} L_total={:.6}",
        run.step1.epochs,
        train.len(),
        last.l_cls,
        last.l_rec,
        last.l_total
    );
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

#[derive(Args)]
struct FinetuneArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint and metrics CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Starting weights: a step-1 checkpoint path or a scheme name.
    #[arg(long)]
    init: Option<String>,
    /// Validation cadence in epochs.
    #[arg(long)]
    val_every: Option<usize>,
    /// Dice denominator: squared or plain.
    #[arg(long)]
    dice_denominator: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    geo: GeometryArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_init_source(raw: &str) -> Result<InitSource> {
    if raw.parse::<Scheme>().is_ok() {
        return Ok(InitSource::Scheme(raw.to_string()));
    }
    let path = PathBuf::from(raw);
    if path.exists() {
        return Ok(InitSource::Checkpoint(path));
    }
    Err(VoxError::usage(format!(
        "--init '{raw}' is neither a known scheme nor an existing checkpoint"
    )))
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let data = pick_path(a.data, &cfg, "data")?;
    let out = pick_path(a.out, &cfg, "out")?;

    let init_raw = pick(a.init, &cfg, "init", "unetr-default".to_string())?;
    let source = parse_init_source(&init_raw)?;

    let mut run = RunConfig::default();
    run.seed = pick_seed(a.seed, &cfg, 0)?;
    run.step2.epochs = pick(a.epochs, &cfg, "epochs", run.step2.epochs)?;
    run.step2.lr = pick(a.lr, &cfg, "lr", run.step2.lr)?;
    run.step2.init_source = source.clone();
    run.val_every = pick(a.val_every, &cfg, "val_every", run.val_every)?;
    let denom_raw = pick(
        a.dice_denominator,
        &cfg,
        "dice_denominator",
        run.dice_denominator.to_string(),
    )?;
    run.dice_denominator = denom_raw.parse()?;

    // With a checkpoint source, geometry defaults come from the checkpoint
    // itself so the transfer lines up.
    let mcfg = match &source {
        InitSource::Checkpoint(path) => {
            let ckpt = load_checkpoint(path)?;
            build_model_cfg(&a.geo, &cfg, ckpt.model.clone())?
        }
        InitSource::Scheme(_) => dataset_model_cfg(&data, &a.geo, &cfg)?,
    };

    let (train, val, _) = load_split(&data)?;
    let (mut model, report) = finetune_model(&mcfg, &run, None)?;
    if let Some(r) = &report {
        println!(
            "transferred {} tensors, kept {} fresh, dropped {}",
            r.copied.len(),
            r.new.len(),
            r.skipped.len()
        );
    }
    let art = train_step2(&train, &val, &mut model, &run)?;

    std::fs::create_dir_all(&out)?;
    let ckpt_path = out.join("finetuned.vwi");
    std::fs::write(&ckpt_path, art.checkpoint.to_bytes())?;
    std::fs::write(out.join("train_loss.csv"), &art.train_csv)?;
    std::fs::write(out.join("val_dice.csv"), &art.val_csv)?;
    match art.val_history.last() {
        Some((epoch, r)) => println!(
            "fine-tuned {} epochs; epoch {epoch} val mean Dice {:.2}",
            run.step2.epochs, r.mean
        ),
        None => println!(
            "fine-tuned {} epochs; no validation volumes available",
            run.step2.epochs
        ),
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Segment-stage checkpoint to evaluate.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory for eval.csv / eval.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which split to score: val, train, or all.
    #[arg(long)]
    split: Option<String>,
    /// Sliding-window overlap fraction.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn segment_model(path: &Path) -> Result<crate::model::Model<f32>> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.stage != Stage::Segment {
        return Err(VoxError::usage(format!(
            "{} is a pretraining checkpoint; fine-tune it first (or pass it to \
             finetune --init)",
            path.display()
        )));
    }
    ckpt.into_model()
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let data = pick_path(a.data, &cfg, "data")?;
    let model_path = pick_path(a.model, &cfg, "model")?;
    let out = pick_path(a.out, &cfg, "out")?;
    let split = pick(a.split, &cfg, "split", "val".to_string())?;
    let overlap = pick(a.overlap, &cfg, "overlap", 0.5)?;

    let (train, val, _) = load_split(&data)?;
    let subset = match split.as_str() {
        "val" => val,
        "train" => train,
        "all" => {
            let mut all = train;
            all.extend(val);
            all
        }
        other => {
            return Err(VoxError::usage(format!(
                "--split must be val, train, or all, got '{other}'"
            )))
        }
    };

    let model = segment_model(&model_path)?;
    let summary = evaluate(&subset, &model, overlap)?;
    let (csv_path, json_path) = write_eval(&out, "eval", &summary)?;
    println!(
        "evaluated {} volumes; mean Dice {:.2}",
        summary.rows.len(),
        summary.mean.mean
    );
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

#[derive(Args)]
struct InferArgs {
    /// Input volume file.
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Segment-stage checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output volume file (input image + predicted labels).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sliding-window overlap fraction.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let volume = pick_path(a.volume, &cfg, "volume")?;
    let model_path = pick_path(a.model, &cfg, "model")?;
    let out = pick_path(a.out, &cfg, "out")?;
    let overlap = pick(a.overlap, &cfg, "overlap", 0.5)?;

    let sample = read_volume(&volume)?;
    let model = segment_model(&model_path)?;
    let image = normalize(&sample.image);
    let labels = sliding_window_infer(&model, &image, model.cfg.dims, overlap)?;

    let mut counts = vec![0usize; model.cfg.classes];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let predicted = VolumeSample {
        id: sample.id.clone(),
        image: sample.image,
        labels,
        dims: sample.dims,
    };
    write_volume(&out, &predicted)?;
    println!("voxels per class: {counts:?}");
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Args)]
struct InitStatsArgs {
    /// Scheme name, e.g. kaiming-normal.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    fan_in: Option<usize>,
    /// Defaults to fan-in.
    #[arg(long)]
    fan_out: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    gain: Option<f64>,
    /// Sigma for trunc-normal.
    #[arg(long)]
    trunc_sigma: Option<f64>,
    /// Treat the draw as a conv kernel KH,KW,KD (affects unetr-default).
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn init_stats(a: InitStatsArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let scheme_raw = pick(a.scheme, &cfg, "scheme", String::new())?;
    if scheme_raw.is_empty() {
        return Err(VoxError::usage("--scheme is required"));
    }
    let scheme: Scheme = scheme_raw.parse()?;
    let fan_in = match a.fan_in {
        Some(v) => v,
        None => cfg
            .get("fan_in")?
            .ok_or_else(|| VoxError::usage("--fan-in is required"))?,
    };
    let fan_out = pick(a.fan_out, &cfg, "fan_out", fan_in)?;
    let samples = pick(a.samples, &cfg, "samples", 100_000)?;
    let gain = pick(a.gain, &cfg, "gain", 1.0)?;
    let trunc_sigma = pick(a.trunc_sigma, &cfg, "trunc_sigma", 0.02)?;
    let seed = pick_seed(a.seed, &cfg, 0)?;

    let mut spec = InitSpec::new(scheme, fan_in, fan_out)
        .with_gain(gain)
        .with_trunc_sigma(trunc_sigma)
        .with_seed(seed);
    let kind = match a.kernel.or(cfg.get("kernel")?) {
        Some(raw) => {
            spec = spec.with_kernel(parse_dims(&raw)?);
            LayerKind::Conv
        }
        None => LayerKind::Linear,
    };

    let drawn = init::sample::<f64>(&spec, &[samples], kind)?;
    let n = samples as f64;
    let mean = drawn.data().iter().sum::<f64>() / n;
    let var = drawn.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in drawn.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    println!("scheme={scheme} fan_in={fan_in} fan_out={fan_out} samples={samples}");
    println!("mean={mean:.6} std={:.6} min={lo:.6} max={hi:.6}", var.sqrt());
    Ok(())
}
