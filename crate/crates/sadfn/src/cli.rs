//! Command-line entry point: dataset and mask generation, the training
//! stages, reconstruction, evaluation, histograms, feature dumps, and
//! timing.
//!
//! Every value a subcommand consumes resolves with the same precedence:
//! explicit flag, then `key = value` entry in the `--config` file, then
//! the built-in default. Each successful run writes a `run.log` into its
//! output directory capturing the resolved configuration, the seed, the
//! build version, and wall time (the wall-time line is the only
//! non-reproducible output of a seeded run). `SADFN_THREADS` caps
//! evaluation parallelism.

use crate::mri::{MaskKind, SamplingMask};
use crate::net::{forward, ParamStore, ReconModel, RecNetSpec, SadfnBinding, SadfnSpec, SegNetSpec, WosSpec};
use crate::phantom::{dataset_load, dataset_save, generate_dataset, tissue_histograms, PhantomConfig, Sample};
use crate::tensor::Graph;
use crate::train::{self, Stage, TrainConfig};
use crate::{metrics, mri, Error, Result};
use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

/// Version string stamped into every run log.
pub const BUILD_VERSION: &str = concat!("sadfn-v", env!("SADFN_BUILD_VERSION"));

#[derive(Parser)]
#[command(name = "sadfn", version, about = "Segmentation-aware deep-fusion MRI reconstruction workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled phantom dataset directory.
    GenData(GenDataArgs),
    /// Generate a sampling mask file.
    GenMask(GenMaskArgs),
    /// Pre-train the reconstruction cascade.
    TrainRec(TrainArgs),
    /// Pre-train the segmenter.
    TrainSeg(TrainArgs),
    /// Train the width-matched no-segmentation control from scratch.
    TrainWos(TrainArgs),
    /// Fine-tune the fusion network on frozen pre-nets.
    FinetuneSadfn(FinetuneArgs),
    /// Fine-tune the cascade under the joint objective with a frozen segmenter.
    FinetuneCascade(FinetuneArgs),
    /// Reconstruct every sample of a dataset with a chosen model.
    Reconstruct(ReconstructArgs),
    /// Evaluate a model: reconstruction and segmentation metrics report.
    Evaluate(EvaluateArgs),
    /// Per-tissue intensity histograms of a dataset (optionally of its
    /// zero-filled reconstructions).
    Histogram(HistogramArgs),
    /// Dump the fusion-stage intermediate tensors for one sample.
    DumpFeatures(DumpFeaturesArgs),
    /// Measure per-model reconstruction wall time.
    Timeit(TimeitArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of samples [default: 40].
    #[arg(long)]
    count: Option<usize>,
    /// Image height [default: 64].
    #[arg(long)]
    height: Option<usize>,
    /// Image width [default: 64].
    #[arg(long)]
    width: Option<usize>,
    /// Square image side; sets height and width together.
    #[arg(long)]
    size: Option<usize>,
    /// Run seed [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenMaskArgs {
    /// Output mask file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mask kind: cartesian1d | random2d [default: cartesian1d].
    #[arg(long)]
    kind: Option<String>,
    /// Sampled fraction in (0, 1] [default: 0.3].
    #[arg(long)]
    fraction: Option<f64>,
    /// Mask height [default: 64].
    #[arg(long)]
    height: Option<usize>,
    /// Mask width [default: 64].
    #[arg(long)]
    width: Option<usize>,
    /// Square mask side; sets height and width together.
    #[arg(long)]
    size: Option<usize>,
    /// Run seed [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (last `--holdout` samples are held out).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mask file (reconstruction stages only).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Continue from an existing checkpoint directory.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Holdout sample count taken from the end of the dataset [default: 8].
    #[arg(long)]
    holdout: Option<usize>,
    /// Cascade blocks (reconstruction stages) [default: 2].
    #[arg(long)]
    blocks: Option<usize>,
    /// Channel width [default: 8].
    #[arg(long)]
    width: Option<usize>,
    /// Optimization steps [default: stage desk schedule].
    #[arg(long)]
    iters: Option<usize>,
    /// Batch size [default: stage desk schedule].
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: stage desk schedule].
    #[arg(long)]
    lr: Option<f64>,
    /// Holdout evaluation/checkpoint cadence; 0 = ends only [default: stage desk schedule].
    #[arg(long)]
    eval_every: Option<usize>,
    /// Run seed [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Dataset directory (last `--holdout` samples are held out).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mask file.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Pre-trained reconstruction checkpoint directory.
    #[arg(long)]
    rec: Option<PathBuf>,
    /// Pre-trained segmenter checkpoint directory.
    #[arg(long)]
    seg: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Holdout sample count taken from the end of the dataset [default: 8].
    #[arg(long)]
    holdout: Option<usize>,
    /// Segmentation loss weight (cascade only) [default: 1.0].
    #[arg(long)]
    lambda: Option<f64>,
    /// Optimization steps [default: stage desk schedule].
    #[arg(long)]
    iters: Option<usize>,
    /// Batch size [default: stage desk schedule].
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: stage desk schedule].
    #[arg(long)]
    lr: Option<f64>,
    /// Holdout evaluation/checkpoint cadence; 0 = ends only [default: stage desk schedule].
    #[arg(long)]
    eval_every: Option<usize>,
    /// Run seed [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Dataset directory to reconstruct.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mask file.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output directory for `recon_%04d.tns`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model: zero_filled | rec | sadfn | wos [default: zero_filled].
    /// For a cascade fine-tune checkpoint, pass `--model rec --ckpt <dir>/rec`.
    #[arg(long)]
    model: Option<String>,
    /// Model checkpoint directory (not used by zero_filled).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Test dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mask file.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Model: zero_filled | rec | sadfn | wos [default: zero_filled].
    #[arg(long)]
    model: Option<String>,
    /// Model checkpoint directory (not used by zero_filled).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Segmenter checkpoint directory (scores every reconstruction).
    #[arg(long)]
    seg: Option<PathBuf>,
    /// Output directory for `report.tsv` / `report.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct HistogramArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Histogram bins over [0, 1] [default: 20].
    #[arg(long)]
    bins: Option<usize>,
    /// Mask file: histogram the zero-filled reconstructions instead of
    /// the ground-truth images.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output table file [default: histogram.tsv].
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DumpFeaturesArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample index to dump [default: 0].
    #[arg(long)]
    index: Option<usize>,
    /// Mask file.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Fusion checkpoint directory (rec/ seg/ fusion/).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory for the feature tensors.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TimeitArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mask file.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Repetitions over the dataset [default: 3].
    #[arg(long)]
    reps: Option<usize>,
    /// Reconstruction checkpoint to time (optional).
    #[arg(long)]
    rec: Option<PathBuf>,
    /// Fusion checkpoint to time (optional).
    #[arg(long)]
    sadfn: Option<PathBuf>,
    /// Control checkpoint to time (optional).
    #[arg(long)]
    wos: Option<PathBuf>,
    /// Output directory for `timings.tsv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

// -- config-file precedence ----------------------------------------------

/// Parses a `key = value` config file: one pair per line, `#` comments
/// and blank lines ignored.
pub fn parse_config_file(text: &str) -> Result<IndexMap<String, String>> {
    let mut map = IndexMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Invalid(format!(
                "config line {} is not `key = value`: {line:?}",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Resolves values by precedence (flag, config file, default) and records
/// every resolved entry for the run log.
struct Resolver {
    file: IndexMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    fn new(config: Option<&Path>) -> Result<Resolver> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_config_file(&text)?
            }
            None => IndexMap::new(),
        };
        Ok(Resolver {
            file,
            resolved: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.file.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Invalid(format!("config key {key} has unparseable value {raw:?}"))),
            None => Ok(None),
        }
    }

    fn get<T: FromStr + ToString>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    fn get_opt<T: FromStr + ToString>(&mut self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.resolved.push((key.to_string(), v.to_string()));
        }
        Ok(v)
    }

    /// Path-valued variant of [`Resolver::get_opt`] (`PathBuf` has no
    /// `ToString`, so the generic getters cannot log it).
    fn path_opt(&mut self, flag: Option<PathBuf>, key: &str) -> Result<Option<PathBuf>> {
        let v = flag.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(v) = &v {
            self.resolved.push((key.to_string(), v.display().to_string()));
        }
        Ok(v)
    }

    fn path_or(&mut self, flag: Option<PathBuf>, key: &str, default: PathBuf) -> Result<PathBuf> {
        let v = flag
            .or_else(|| self.file.get(key).map(PathBuf::from))
            .unwrap_or(default);
        self.resolved.push((key.to_string(), v.display().to_string()));
        Ok(v)
    }

    fn require_path(&mut self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.path_opt(flag, key)?
            .ok_or_else(|| Error::Invalid(format!("missing required --{key} (or config key {key})")))
    }
}

fn write_run_log(dir: &Path, command: &str, resolved: &[(String, String)], started: Instant) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut log = format!("command = {command}\nversion = {BUILD_VERSION}\n");
    for (k, v) in resolved {
        log.push_str(&format!("{k} = {v}\n"));
    }
    log.push_str(&format!("wall_time_s = {:.3}\n", started.elapsed().as_secs_f64()));
    let path = dir.join("run.log");
    std::fs::write(&path, log).map_err(|e| Error::io(&path, e))
}

// -- shared loading helpers ------------------------------------------------

fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    let samples = dataset_load(dir)
        .map_err(|e| Error::Invalid(format!("no samples found under {}: {e}", dir.display())))?;
    if samples.is_empty() {
        return Err(Error::Invalid(format!("no samples found under {}", dir.display())));
    }
    Ok(samples)
}

fn split_holdout(samples: &[Sample], holdout: usize) -> Result<(&[Sample], &[Sample])> {
    if holdout >= samples.len() {
        return Err(Error::Invalid(format!(
            "holdout of {holdout} leaves no training samples out of {}",
            samples.len()
        )));
    }
    Ok(samples.split_at(samples.len() - holdout))
}

fn load_model(model: &str, ckpt: Option<&Path>) -> Result<ReconModel> {
    let need = || ckpt.ok_or_else(|| Error::Invalid(format!("model {model} needs --ckpt")));
    match model {
        "zero_filled" => Ok(ReconModel::ZeroFilled),
        "rec" => ReconModel::load_rec(need()?),
        "sadfn" => ReconModel::load_sadfn(need()?),
        "wos" => ReconModel::load_wos(need()?),
        other => Err(Error::Invalid(format!(
            "unknown model {other:?}; expected zero_filled | rec | sadfn | wos"
        ))),
    }
}

fn load_segmenter(dir: &Path) -> Result<(ParamStore<f32>, SegNetSpec)> {
    let (store, meta) = ParamStore::<f32>::load(dir)?;
    let spec = SegNetSpec::from_meta(&meta)?;
    Ok((store, spec))
}

/// Applies the `SADFN_THREADS` cap to the global thread pool. Safe to
/// call repeatedly; the first call wins.
fn init_threads() {
    if let Ok(v) = std::env::var("SADFN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

// -- handlers ----------------------------------------------------------------

fn run_gen_data(a: GenDataArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let out = r.require_path(a.out, "out")?;
    let size = r.get_opt(a.size, "size")?;
    let count = r.get(a.count, "count", 40)?;
    let height = r.get(a.height.or(size), "height", 64)?;
    let width = r.get(a.width.or(size), "width", 64)?;
    let seed = r.get(a.seed, "seed", 1)?;

    let cfg = PhantomConfig::with_dims(height, width);
    let samples = generate_dataset(&cfg, seed, count)?;
    dataset_save(&samples, &out)?;
    write_run_log(&out, "gen-data", &r.resolved, started)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn run_gen_mask(a: GenMaskArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let out = r.require_path(a.out, "out")?;
    let size = r.get_opt(a.size, "size")?;
    let kind = MaskKind::parse(&r.get(a.kind, "kind", "cartesian1d".to_string())?)?;
    let fraction = r.get(a.fraction, "fraction", 0.3)?;
    let height = r.get(a.height.or(size), "height", 64)?;
    let width = r.get(a.width.or(size), "width", 64)?;
    let seed = r.get(a.seed, "seed", 1)?;

    let mask = SamplingMask::generate(kind, height, width, fraction, seed)?;
    mask.save(&out)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_run_log(dir, "gen-mask", &r.resolved, started)?;
    println!(
        "wrote {} mask {}x{} with {} of {} points set ({} full rows)",
        kind.as_str(),
        height,
        width,
        mask.ones(),
        height * width,
        mask.full_rows()
    );
    Ok(())
}

/// Resolves the shared training-stage hyperparameters against a stage's
/// desk defaults.
fn resolve_train_cfg(
    r: &mut Resolver,
    stage: Stage,
    ckpt: PathBuf,
    iters: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    eval_every: Option<usize>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let desk = TrainConfig::desk(stage, &ckpt);
    let mut cfg = TrainConfig {
        stage,
        iterations: r.get(iters, "iters", desk.iterations)?,
        batch: r.get(batch, "batch", desk.batch)?,
        lr: r.get(lr, "lr", desk.lr)?,
        beta1: desk.beta1,
        beta2: desk.beta2,
        seed: r.get(seed, "seed", desk.seed)?,
        eval_every: r.get(eval_every, "eval_every", desk.eval_every)?,
        checkpoint_dir: ckpt,
        scale: 1.0,
    };
    cfg.scale = cfg.iterations as f64 / TrainConfig::full_scale(stage, "").iterations as f64;
    cfg.validate()?;
    Ok(cfg)
}

fn run_train_rec(a: TrainArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let mask_path = r.require_path(a.mask, "mask")?;
    let ckpt = r.require_path(a.ckpt, "ckpt")?;
    let init_dir = r.path_opt(a.init, "init")?;
    let holdout = r.get(a.holdout, "holdout", 8)?;
    let blocks = r.get(a.blocks, "blocks", 2)?;
    let width = r.get(a.width, "width", 8)?;
    let cfg = resolve_train_cfg(&mut r, Stage::Rec, ckpt, a.iters, a.batch, a.lr, a.eval_every, a.seed)?;

    let samples = load_samples(&data)?;
    let (train, hold) = split_holdout(&samples, holdout)?;
    let mask = SamplingMask::load(&mask_path)?;
    let (spec, init) = match init_dir {
        Some(dir) => {
            let (store, meta) = ParamStore::<f32>::load(&dir)?;
            (RecNetSpec::from_meta(&meta)?, Some(store))
        }
        None => (RecNetSpec { blocks, width }, None),
    };
    let out = train::pretrain_rec(&cfg, &spec, init, train, hold, &mask)?;
    write_run_log(&cfg.checkpoint_dir, "train-rec", &r.resolved, started)?;
    report_training("train-rec", &out.curve, &cfg);
    Ok(())
}

fn run_train_seg(a: TrainArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let ckpt = r.require_path(a.ckpt, "ckpt")?;
    let init_dir = r.path_opt(a.init, "init")?;
    let holdout = r.get(a.holdout, "holdout", 8)?;
    let width = r.get(a.width, "width", 8)?;
    let cfg = resolve_train_cfg(&mut r, Stage::Seg, ckpt, a.iters, a.batch, a.lr, a.eval_every, a.seed)?;

    let samples = load_samples(&data)?;
    let (train, hold) = split_holdout(&samples, holdout)?;
    let (spec, init) = match init_dir {
        Some(dir) => {
            let (store, meta) = ParamStore::<f32>::load(&dir)?;
            (SegNetSpec::from_meta(&meta)?, Some(store))
        }
        None => (SegNetSpec { width, classes: 4 }, None),
    };
    let out = train::pretrain_seg(&cfg, &spec, init, train, hold)?;
    write_run_log(&cfg.checkpoint_dir, "train-seg", &r.resolved, started)?;
    report_training("train-seg", &out.curve, &cfg);
    Ok(())
}

fn run_train_wos(a: TrainArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let mask_path = r.require_path(a.mask, "mask")?;
    let ckpt = r.require_path(a.ckpt, "ckpt")?;
    let holdout = r.get(a.holdout, "holdout", 8)?;
    let blocks = r.get(a.blocks, "blocks", 2)?;
    let width = r.get(a.width, "width", 8)?;
    let cfg = resolve_train_cfg(&mut r, Stage::Wos, ckpt, a.iters, a.batch, a.lr, a.eval_every, a.seed)?;

    let samples = load_samples(&data)?;
    let (train, hold) = split_holdout(&samples, holdout)?;
    let mask = SamplingMask::load(&mask_path)?;
    let spec = WosSpec { blocks, width };
    let out = train::pretrain_wos(&cfg, &spec, train, hold, &mask)?;
    write_run_log(&cfg.checkpoint_dir, "train-wos", &r.resolved, started)?;
    report_training("train-wos", &out.curve, &cfg);
    Ok(())
}

fn run_finetune_sadfn(a: FinetuneArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let mask_path = r.require_path(a.mask, "mask")?;
    let rec_dir = r.require_path(a.rec, "rec")?;
    let seg_dir = r.require_path(a.seg, "seg")?;
    let ckpt = r.require_path(a.ckpt, "ckpt")?;
    let holdout = r.get(a.holdout, "holdout", 8)?;
    let cfg = resolve_train_cfg(&mut r, Stage::Sadfn, ckpt, a.iters, a.batch, a.lr, a.eval_every, a.seed)?;

    let samples = load_samples(&data)?;
    let (train, hold) = split_holdout(&samples, holdout)?;
    let mask = SamplingMask::load(&mask_path)?;
    let (rec_store, rec_meta) = ParamStore::<f32>::load(&rec_dir)?;
    let (seg_store, seg_meta) = ParamStore::<f32>::load(&seg_dir)?;
    let spec = SadfnSpec {
        rec: RecNetSpec::from_meta(&rec_meta)?,
        seg: SegNetSpec::from_meta(&seg_meta)?,
    };
    let out = train::finetune_sadfn(&cfg, &spec, rec_store, seg_store, train, hold, &mask)?;
    write_run_log(&cfg.checkpoint_dir, "finetune-sadfn", &r.resolved, started)?;
    report_training("finetune-sadfn", &out.curve, &cfg);
    Ok(())
}

fn run_finetune_cascade(a: FinetuneArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let mask_path = r.require_path(a.mask, "mask")?;
    let rec_dir = r.require_path(a.rec, "rec")?;
    let seg_dir = r.require_path(a.seg, "seg")?;
    let ckpt = r.require_path(a.ckpt, "ckpt")?;
    let holdout = r.get(a.holdout, "holdout", 8)?;
    let lambda = r.get(a.lambda, "lambda", 1.0)?;
    let cfg = resolve_train_cfg(&mut r, Stage::Cascade, ckpt, a.iters, a.batch, a.lr, a.eval_every, a.seed)?;

    let samples = load_samples(&data)?;
    let (train, hold) = split_holdout(&samples, holdout)?;
    let mask = SamplingMask::load(&mask_path)?;
    let (rec_store, rec_meta) = ParamStore::<f32>::load(&rec_dir)?;
    let (seg_store, seg_meta) = ParamStore::<f32>::load(&seg_dir)?;
    let rec_spec = RecNetSpec::from_meta(&rec_meta)?;
    let seg_spec = SegNetSpec::from_meta(&seg_meta)?;
    let out = train::finetune_cascade(&cfg, &rec_spec, &seg_spec, rec_store, seg_store, lambda, train, hold, &mask)?;
    write_run_log(&cfg.checkpoint_dir, "finetune-cascade", &r.resolved, started)?;
    report_training("finetune-cascade", &out.curve, &cfg);
    Ok(())
}

fn report_training(name: &str, curve: &train::Curve, cfg: &TrainConfig) {
    let last = curve.eval_rows().last();
    let summary = last
        .map(|row| {
            row.metrics
                .iter()
                .zip(&curve.metric_names)
                .filter_map(|(v, n)| v.map(|v| format!("{n} {v:.4}")))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .unwrap_or_default();
    println!(
        "{name}: {} iterations done; final holdout [{summary}]; checkpoint in {}",
        cfg.iterations,
        cfg.checkpoint_dir.display()
    );
}

fn run_reconstruct(a: ReconstructArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let mask_path = r.require_path(a.mask, "mask")?;
    let out = r.require_path(a.out, "out")?;
    let model_name = r.get(a.model, "model", "zero_filled".to_string())?;
    let ckpt = r.path_opt(a.ckpt, "ckpt")?;

    let samples = load_samples(&data)?;
    let mask = SamplingMask::load(&mask_path)?;
    let model = load_model(&model_name, ckpt.as_deref())?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (i, s) in samples.iter().enumerate() {
        let y = mri::undersample(&s.image, &mask)?;
        let recon = model.reconstruct(&y, &mask)?;
        recon.save_tns(&out.join(format!("recon_{i:04}.tns")))?;
    }
    write_run_log(&out, "reconstruct", &r.resolved, started)?;
    println!("wrote {} reconstructions to {}", samples.len(), out.display());
    Ok(())
}

fn run_evaluate(a: EvaluateArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let mask_path = r.require_path(a.mask, "mask")?;
    let seg_dir = r.require_path(a.seg, "seg")?;
    let out = r.require_path(a.out, "out")?;
    let model_name = r.get(a.model, "model", "zero_filled".to_string())?;
    let ckpt = r.path_opt(a.ckpt, "ckpt")?;

    let samples = load_samples(&data)?;
    let mask = SamplingMask::load(&mask_path)?;
    let model = load_model(&model_name, ckpt.as_deref())?;
    let (seg_store, seg_spec) = load_segmenter(&seg_dir)?;
    let report = metrics::evaluate_report(&model, &seg_store, &seg_spec, &samples, &mask)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let table = report.to_table_string();
    std::fs::write(out.join("report.tsv"), &table).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join("report.csv"), report.to_csv_string()).map_err(|e| Error::io(&out, e))?;
    write_run_log(&out, "evaluate", &r.resolved, started)?;
    print!("{table}");
    Ok(())
}

fn run_histogram(a: HistogramArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let bins = r.get(a.bins, "bins", 20)?;
    let mask_path = r.path_opt(a.mask, "mask")?;
    let out = r.path_or(a.out, "out", PathBuf::from("histogram.tsv"))?;

    let samples = load_samples(&data)?;
    let mask = match &mask_path {
        Some(p) => Some(SamplingMask::load(p)?),
        None => None,
    };
    let table = tissue_histograms(&samples, mask.as_ref(), bins)?;
    let text = table.to_table_string();
    std::fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_run_log(dir, "histogram", &r.resolved, started)?;
    print!("{text}");
    Ok(())
}

fn run_dump_features(a: DumpFeaturesArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let index = r.get(a.index, "index", 0)?;
    let mask_path = r.require_path(a.mask, "mask")?;
    let ckpt = r.require_path(a.ckpt, "ckpt")?;
    let out = r.require_path(a.out, "out")?;

    let samples = load_samples(&data)?;
    let sample = samples
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("sample index {index} out of range 0..{}", samples.len())))?;
    let mask = Arc::new(SamplingMask::load(&mask_path)?);
    let ReconModel::Sadfn { spec, rec, seg, fusion } = ReconModel::load_sadfn(&ckpt)? else {
        return Err(Error::Invalid("fusion checkpoint did not load as a fusion model".into()));
    };

    let y = Arc::new(mri::undersample(&sample.image, &mask)?);
    let x0 = mri::zero_filled(&y, &mask)?;
    let mut g = Graph::new();
    let bind = SadfnBinding::new(&mut g, &rec, &seg, &fusion)?;
    let x0n = g.constant(x0);
    let f = forward::sadfn_net(&mut g, &bind, &spec, x0n, &y, &mask)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    g.value(f.pre_recon).save_tns(&out.join("pre_recon.tns"))?;
    g.value(f.seg_probs).save_tns(&out.join("seg_probs.tns"))?;
    g.value(f.seg_feat).save_tns(&out.join("seg_feat.tns"))?;
    for (name, node) in &f.fused {
        let file = format!("{}.tns", name.replace('.', "_"));
        g.value(*node).save_tns(&out.join(file))?;
    }
    g.value(f.output).save_tns(&out.join("output.tns"))?;
    write_run_log(&out, "dump-features", &r.resolved, started)?;
    println!("wrote {} fused feature maps (and pipeline tensors) to {}", f.fused.len(), out.display());
    Ok(())
}

fn run_timeit(a: TimeitArgs, started: Instant) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data = r.require_path(a.data, "data")?;
    let mask_path = r.require_path(a.mask, "mask")?;
    let reps = r.get(a.reps, "reps", 3)?.max(1);
    let rec_dir = r.path_opt(a.rec, "rec")?;
    let sadfn_dir = r.path_opt(a.sadfn, "sadfn")?;
    let wos_dir = r.path_opt(a.wos, "wos")?;
    let out = r.require_path(a.out, "out")?;

    let samples = load_samples(&data)?;
    let mask = SamplingMask::load(&mask_path)?;
    let mut models = vec![ReconModel::ZeroFilled];
    if let Some(d) = rec_dir {
        models.push(ReconModel::load_rec(&d)?);
    }
    if let Some(d) = sadfn_dir {
        models.push(ReconModel::load_sadfn(&d)?);
    }
    if let Some(d) = wos_dir {
        models.push(ReconModel::load_wos(&d)?);
    }

    let measurements: Vec<_> = samples
        .iter()
        .map(|s| mri::undersample(&s.image, &mask))
        .collect::<Result<_>>()?;
    let mut table = String::from("model\tmean_s_per_sample\tsamples\treps\n");
    let mut console = String::new();
    for model in &models {
        let t0 = Instant::now();
        for _ in 0..reps {
            for y in &measurements {
                let _ = model.reconstruct(y, &mask)?;
            }
        }
        let per_sample = t0.elapsed().as_secs_f64() / (reps * samples.len()) as f64;
        table.push_str(&format!("{}\t{per_sample:.6}\t{}\t{reps}\n", model.name(), samples.len()));
        console.push_str(&format!("{}: {per_sample:.6} s/sample\n", model.name()));
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join("timings.tsv"), &table).map_err(|e| Error::io(&out, e))?;
    write_run_log(&out, "timeit", &r.resolved, started)?;
    print!("{console}");
    Ok(())
}

// -- dispatch ------------------------------------------------------------

/// Parses and runs a full command line (`argv[0]` is the program name).
/// Returns the process exit code: 0 on success, 2 on usage errors, 1 on
/// runtime failures (with a one-line diagnostic on stderr).
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_threads();
    let started = Instant::now();
    let result = match cli.cmd {
        Cmd::GenData(a) => run_gen_data(a, started),
        Cmd::GenMask(a) => run_gen_mask(a, started),
        Cmd::TrainRec(a) => run_train_rec(a, started),
        Cmd::TrainSeg(a) => run_train_seg(a, started),
        Cmd::TrainWos(a) => run_train_wos(a, started),
        Cmd::FinetuneSadfn(a) => run_finetune_sadfn(a, started),
        Cmd::FinetuneCascade(a) => run_finetune_cascade(a, started),
        Cmd::Reconstruct(a) => run_reconstruct(a, started),
        Cmd::Evaluate(a) => run_evaluate(a, started),
        Cmd::Histogram(a) => run_histogram(a, started),
        Cmd::DumpFeatures(a) => run_dump_features(a, started),
        Cmd::Timeit(a) => run_timeit(a, started),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
