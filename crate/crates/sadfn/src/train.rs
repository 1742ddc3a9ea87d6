//! Three-stage training: reconstruction pre-training, segmentation
//! pre-training, and fusion fine-tuning with the two pre-nets frozen —
//! plus the jointly-supervised cascade and the no-segmentation control.
//!
//! Every driver runs Adam on a fresh graph per iteration, samples batches
//! uniformly with replacement from a dedicated seeded stream, records a
//! loss/metric curve, and checkpoints into its configured directory at
//! every evaluation point (so a divergence abort always leaves the last
//! good parameters on disk). Runs are reproducible: the same config and
//! seed give identical curves and identical checkpoint bytes.

use crate::metrics;
use crate::mri::{undersample, zero_filled, ComplexGrid, SamplingMask};
use crate::net::{
    forward, init, Bound, ParamStore, RecNetSpec, SadfnBinding, SadfnSpec, SegNetSpec, WosSpec,
};
use crate::phantom::{augment, Sample};
use crate::rng;
use crate::tensor::{adam::Adam, BnMode, Graph, NodeId, Tensor};
use crate::{Error, Result};
use rand::Rng;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Probability floor inside cross-entropy logs.
pub const CE_FLOOR: f64 = 1e-12;
/// Running-statistic retention per batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Curve file written into every checkpoint directory.
pub const CURVE_FILE: &str = "curve.csv";

// -- configuration -----------------------------------------------------------

/// Which training stage a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Reconstruction cascade pre-training.
    Rec,
    /// Segmenter pre-training.
    Seg,
    /// Fusion fine-tuning with frozen pre-nets.
    Sadfn,
    /// Jointly-supervised cascade baseline.
    Cascade,
    /// Width-matched no-segmentation control.
    Wos,
}

impl Stage {
    /// Stable lowercase tag (used in config files and logs).
    pub fn tag(&self) -> &'static str {
        match self {
            Stage::Rec => "rec",
            Stage::Seg => "seg",
            Stage::Sadfn => "sadfn",
            Stage::Cascade => "cascade",
            Stage::Wos => "wos",
        }
    }

    /// Parses a stage tag.
    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "rec" => Ok(Stage::Rec),
            "seg" => Ok(Stage::Seg),
            "sadfn" => Ok(Stage::Sadfn),
            "cascade" => Ok(Stage::Cascade),
            "wos" => Ok(Stage::Wos),
            other => Err(Error::Invalid(format!("unknown training stage {other:?}"))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Stage this config drives.
    pub stage: Stage,
    /// Optimization steps.
    pub iterations: usize,
    /// Samples per step (with replacement).
    pub batch: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Run seed: drives initialization and batch sampling streams.
    pub seed: u64,
    /// Holdout evaluation (and checkpoint) cadence; 0 evaluates only at
    /// iterations 0 and `iterations`.
    pub eval_every: usize,
    /// Directory receiving checkpoints and the curve file.
    pub checkpoint_dir: PathBuf,
    /// Fraction of the full-scale schedule this config represents
    /// (informational; 1.0 for the full schedule).
    pub scale: f64,
}

impl TrainConfig {
    /// Full-scale schedule of a stage: 32000 pre-training iterations at
    /// lr 1e-3 (batch 4 reconstruction / batch 16 segmentation crops),
    /// 12000 fine-tuning iterations at lr 1e-4; the control gets the
    /// combined pre-train + fine-tune budget.
    pub fn full_scale(stage: Stage, checkpoint_dir: impl Into<PathBuf>) -> Self {
        let (iterations, batch, lr) = match stage {
            Stage::Rec => (32_000, 4, 1e-3),
            Stage::Seg => (32_000, 16, 1e-3),
            Stage::Sadfn => (12_000, 4, 1e-4),
            Stage::Cascade => (12_000, 4, 1e-4),
            Stage::Wos => (44_000, 4, 1e-3),
        };
        TrainConfig {
            stage,
            iterations,
            batch,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            seed: 1,
            eval_every: 1000,
            checkpoint_dir: checkpoint_dir.into(),
            scale: 1.0,
        }
    }

    /// Shrinks the schedule by a factor: iterations and cadence scale
    /// down (floored at 1 where applicable), everything else is kept.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.iterations = ((self.iterations as f64 * factor).round() as usize).max(1);
        if self.eval_every > 0 {
            self.eval_every = ((self.eval_every as f64 * factor).round() as usize).max(1);
        }
        self.scale *= factor;
        self
    }

    /// Desk-scale schedule: a documented shrink of the full-scale one
    /// that finishes in minutes on one core at 64×64.
    pub fn desk(stage: Stage, checkpoint_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = TrainConfig::full_scale(stage, checkpoint_dir);
        // The short schedules compensate with a higher step size: the
        // full-scale rates assume tens of thousands of iterations.
        let (iterations, batch, lr, eval_every) = match stage {
            Stage::Rec => (300, 4, 3e-3, 50),
            Stage::Seg => (300, 8, 3e-3, 50),
            Stage::Sadfn => (160, 4, 1e-3, 40),
            Stage::Cascade => (120, 4, 1e-3, 40),
            // The control gets the fusion route's combined budget:
            // 300 pre-training plus 160 fine-tuning iterations.
            Stage::Wos => (460, 4, 3e-3, 92),
        };
        cfg.scale = iterations as f64 / cfg.iterations as f64;
        cfg.iterations = iterations;
        cfg.batch = batch;
        cfg.lr = lr;
        cfg.eval_every = eval_every;
        cfg
    }

    /// Rejects degenerate hyperparameters.
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::Invalid("training batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Invalid(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.scale > 0.0) {
            return Err(Error::Invalid(format!("schedule scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Invalid(format!(
                "config is tagged for stage {} but was passed to the {} driver",
                self.stage.tag(),
                stage.tag()
            )));
        }
        Ok(())
    }
}

// -- curves ------------------------------------------------------------------

/// One curve row: training-batch loss (absent on the pre-training row 0)
/// and periodic holdout metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    /// Iteration number (0 = before any update).
    pub iter: usize,
    /// Training-batch loss at this iteration's parameters.
    pub loss: Option<f64>,
    /// Holdout metrics, present at evaluation points.
    pub metrics: Vec<Option<f64>>,
}

/// A loss/metric training curve with named metric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    /// Metric column names (after `iter,loss`).
    pub metric_names: Vec<&'static str>,
    /// Rows in iteration order.
    pub rows: Vec<CurveRow>,
}

impl Curve {
    fn new(metric_names: &[&'static str]) -> Curve {
        Curve {
            metric_names: metric_names.to_vec(),
            rows: Vec::new(),
        }
    }

    /// CSV rendering: header `iter,loss,<metrics..>`, empty cells for
    /// absent values.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("iter,loss");
        for name in &self.metric_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        let cell = |v: &Option<f64>| v.map(|v| format!("{v:.6e}")).unwrap_or_default();
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.iter, cell(&row.loss)));
            for m in &row.metrics {
                out.push(',');
                out.push_str(&cell(m));
            }
            out.push('\n');
        }
        out
    }

    /// Writes the CSV file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Loss values of rows that carry one, in iteration order.
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.loss).collect()
    }

    /// Rows with metrics present (the evaluation points).
    pub fn eval_rows(&self) -> impl Iterator<Item = &CurveRow> {
        self.rows.iter().filter(|r| r.metrics.iter().any(|m| m.is_some()))
    }
}

/// A finished training run: the trained store and its curve. Checkpoints
/// and the curve file are also on disk in the config's directory.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Trained parameters (for the fusion stage: the fusion store).
    pub store: ParamStore<f32>,
    /// Loss/metric curve.
    pub curve: Curve,
}

// -- losses ------------------------------------------------------------------

/// Mean squared-error reconstruction loss over a batch: `(1/L) Σ_i
/// ‖out_i − gt_i‖²` as a graph scalar.
pub fn loss_rec<T: crate::Real>(g: &mut Graph<T>, pairs: &[(NodeId, &Tensor<T>)]) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::Invalid("reconstruction loss needs a nonempty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for (out, gt) in pairs {
        let term = g.sq_diff_sum(*out, gt)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(g.scale(total.expect("nonempty batch"), T::from_f64(1.0 / pairs.len() as f64)))
}

/// Pixel-wise cross-entropy against integer labels, summed over the whole
/// batch (no averaging), with the [`CE_FLOOR`] probability floor.
pub fn loss_seg<T: crate::Real>(g: &mut Graph<T>, probs: NodeId, labels: &[u32]) -> Result<NodeId> {
    g.nll_one_hot(probs, labels, T::from_f64(CE_FLOOR))
}

// -- shared driver machinery -------------------------------------------------

/// A training/holdout sample with its measurement pipeline precomputed
/// once: undersampled k-space, zero-filled seed, flattened labels, and a
/// handle on the mask for data-fidelity layers.
pub struct PreparedSample {
    /// Full-sampled ground-truth image.
    pub gt: Tensor<f32>,
    /// Row-major labels as class indices.
    pub labels: Vec<u32>,
    /// Undersampled measurements.
    pub y: Arc<ComplexGrid<f32>>,
    /// Zero-filled reconstruction (network input).
    pub x0: Tensor<f32>,
    /// Sampling mask handle.
    pub mask: Arc<SamplingMask>,
}

/// Precomputes the measurement pipeline for a sample set.
pub fn prepare(samples: &[Sample], mask: &SamplingMask) -> Result<Vec<PreparedSample>> {
    let mask = Arc::new(mask.clone());
    samples
        .iter()
        .map(|s| {
            let y = Arc::new(undersample(&s.image, &mask)?);
            let x0 = zero_filled(&y, &mask)?;
            Ok(PreparedSample {
                gt: s.image.clone(),
                labels: s.label.as_u32(),
                y,
                x0,
                mask: Arc::clone(&mask),
            })
        })
        .collect()
}

fn sample_batch(r: &mut impl Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| r.gen_range(0..n)).collect()
}

fn divergence_error(iter: usize, dir: &Path) -> Error {
    Error::NonFinite(format!(
        "training loss at iteration {iter}; last good checkpoint kept in {}",
        dir.display()
    ))
}

/// Applies one Adam step to every trainable parameter bound in `bound`,
/// reading gradients from the graph (absent gradients count as zero).
fn adam_step(opt: &mut Adam<f32>, g: &Graph<f32>, bound: &Bound, store: &mut ParamStore<f32>) -> Result<()> {
    opt.begin_step();
    let names: Vec<String> = bound.ids().map(|(n, _)| n.to_string()).collect();
    for name in names {
        if !store.get(&name)?.trainable {
            continue;
        }
        let node = bound.id(&name)?;
        let param = store.get_mut(&name)?;
        match g.grad(node) {
            Some(grad) => opt.update(&name, param.tensor.data_mut(), grad)?,
            None => {
                let zeros = vec![0.0f32; param.tensor.len()];
                opt.update(&name, param.tensor.data_mut(), &zeros)?;
            }
        }
    }
    Ok(())
}

/// Mean holdout PSNR/SSIM of a reconstruction closure.
fn eval_recon(
    recon: &dyn Fn(&PreparedSample) -> Result<Tensor<f32>>,
    holdout: &[PreparedSample],
) -> Result<(f64, f64)> {
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for prep in holdout {
        let r = recon(prep)?;
        psnr_sum += metrics::psnr(&r, &prep.gt, 1.0)?;
        ssim_sum += metrics::ssim(&r, &prep.gt, 1.0)?;
    }
    let n = holdout.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

/// The shared reconstruction-family loop (pre-training, fine-tuning, the
/// control, and the cascade all drive it): per iteration, sample a batch,
/// build the loss via `build_loss` on a fresh graph, backprop, Adam-step
/// the trainable store, and periodically evaluate/checkpoint.
#[allow(clippy::too_many_arguments)]
fn train_rec_family(
    cfg: &TrainConfig,
    train: &[Sample],
    holdout: &[Sample],
    mask: &SamplingMask,
    store: &mut ParamStore<f32>,
    build_loss: &mut dyn FnMut(
        &mut Graph<f32>,
        &ParamStore<f32>,
        &[PreparedSample],
        &[usize],
    ) -> Result<(NodeId, Bound)>,
    recon: &dyn Fn(&ParamStore<f32>, &PreparedSample) -> Result<Tensor<f32>>,
    save: &mut dyn FnMut(&ParamStore<f32>) -> Result<()>,
) -> Result<Curve> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training needs a nonempty training set".into()));
    }
    let prep_train = prepare(train, mask)?;
    let prep_hold = prepare(holdout, mask)?;

    let mut opt = Adam::new(cfg.lr as f32, cfg.beta1 as f32, cfg.beta2 as f32)?;
    let mut batch_rng = rng::stream(cfg.seed, "batch");
    let mut curve = Curve::new(&["psnr", "ssim"]);

    // Initial checkpoint: the divergence abort path always has a last
    // good state, and a 0-iteration run leaves exactly the initialization.
    save(store)?;
    let eval = |store: &ParamStore<f32>| -> Result<Vec<Option<f64>>> {
        if prep_hold.is_empty() {
            return Ok(vec![None, None]);
        }
        let (p, s) = eval_recon(&|prep| recon(store, prep), &prep_hold)?;
        Ok(vec![Some(p), Some(s)])
    };
    curve.rows.push(CurveRow {
        iter: 0,
        loss: None,
        metrics: eval(store)?,
    });

    for i in 1..=cfg.iterations {
        let indices = sample_batch(&mut batch_rng, train.len(), cfg.batch);
        let mut g = Graph::new();
        let (loss, bound) = build_loss(&mut g, store, &prep_train, &indices)?;
        let loss_v = f64::from(g.value(loss).data()[0]);
        if !loss_v.is_finite() {
            return Err(divergence_error(i, &cfg.checkpoint_dir));
        }
        g.backward(loss)?;
        adam_step(&mut opt, &g, &bound, store)?;

        let at_eval = (cfg.eval_every > 0 && i % cfg.eval_every == 0) || i == cfg.iterations;
        let metrics = if at_eval {
            save(store)?;
            eval(store)?
        } else {
            vec![None, None]
        };
        curve.rows.push(CurveRow {
            iter: i,
            loss: Some(loss_v),
            metrics,
        });
    }
    curve.save(&cfg.checkpoint_dir.join(CURVE_FILE))?;
    Ok(curve)
}

// -- stage drivers -----------------------------------------------------------

/// Pre-trains the reconstruction cascade on mean squared error against
/// full-sampled images. `init` continues from an existing store (shapes
/// must match the spec); otherwise parameters are drawn fresh from the
/// run seed.
pub fn pretrain_rec(
    cfg: &TrainConfig,
    spec: &RecNetSpec,
    init: Option<ParamStore<f32>>,
    train: &[Sample],
    holdout: &[Sample],
    mask: &SamplingMask,
) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Rec)?;
    spec.validate()?;
    let mut store = match init {
        Some(s) => s,
        None => init::init_rec::<f32>(spec, &mut rng::stream(cfg.seed, "init"))?,
    };

    let mut build = |g: &mut Graph<f32>, store: &ParamStore<f32>, prep: &[PreparedSample], idx: &[usize]| {
        let bound = Bound::new(g, store);
        let mut pairs = Vec::with_capacity(idx.len());
        for &i in idx {
            let x0 = g.constant(prep[i].x0.clone());
            let out = forward::rec_net(g, &bound, spec, x0, &prep[i].y, &prep[i].mask)?;
            pairs.push((out, &prep[i].gt));
        }
        let loss = loss_rec(g, &pairs)?;
        Ok((loss, bound))
    };
    let recon = |store: &ParamStore<f32>, prep: &PreparedSample| {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store);
        let x0 = g.constant(prep.x0.clone());
        let out = forward::rec_net(&mut g, &bound, spec, x0, &prep.y, &prep.mask)?;
        Ok(g.value(out).clone())
    };
    let mut save = |store: &ParamStore<f32>| store.save(&cfg.checkpoint_dir, &spec.meta());

    let curve = train_rec_family(cfg, train, holdout, mask, &mut store, &mut build, &recon, &mut save)?;
    Ok(TrainOutcome { store, curve })
}

/// Trains the width-matched no-segmentation control from scratch, with
/// the same loss and sampling as reconstruction pre-training.
pub fn pretrain_wos(
    cfg: &TrainConfig,
    spec: &WosSpec,
    train: &[Sample],
    holdout: &[Sample],
    mask: &SamplingMask,
) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Wos)?;
    spec.validate()?;
    let mut store = init::init_wos::<f32>(spec, &mut rng::stream(cfg.seed, "init"))?;

    let mut build = |g: &mut Graph<f32>, store: &ParamStore<f32>, prep: &[PreparedSample], idx: &[usize]| {
        let bound = Bound::new(g, store);
        let mut pairs = Vec::with_capacity(idx.len());
        for &i in idx {
            let x0 = g.constant(prep[i].x0.clone());
            let out = forward::wos_net(g, &bound, spec, x0, &prep[i].y, &prep[i].mask)?;
            pairs.push((out, &prep[i].gt));
        }
        let loss = loss_rec(g, &pairs)?;
        Ok((loss, bound))
    };
    let recon = |store: &ParamStore<f32>, prep: &PreparedSample| {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store);
        let x0 = g.constant(prep.x0.clone());
        let out = forward::wos_net(&mut g, &bound, spec, x0, &prep.y, &prep.mask)?;
        Ok(g.value(out).clone())
    };
    let mut save = |store: &ParamStore<f32>| store.save(&cfg.checkpoint_dir, &spec.meta());

    let curve = train_rec_family(cfg, train, holdout, mask, &mut store, &mut build, &recon, &mut save)?;
    Ok(TrainOutcome { store, curve })
}

/// Computes the concatenated, upsampled segmenter-tap features of every
/// sample under the frozen pre-nets (pre-reconstruction, segmentation in
/// eval mode, tap upsampling and concatenation). Pure forward pass; the
/// result feeds fine-tuning iterations as a constant per sample.
fn frozen_tap_features(
    spec: &SadfnSpec,
    rec_store: &ParamStore<f32>,
    seg_store: &ParamStore<f32>,
    samples: &[Sample],
    mask: &SamplingMask,
) -> Result<Vec<Tensor<f32>>> {
    let prep = prepare(samples, mask)?;
    let mut out = Vec::with_capacity(prep.len());
    for p in &prep {
        let mut g = Graph::new();
        let rec_bound = Bound::new(&mut g, rec_store);
        let seg_bound = Bound::new(&mut g, seg_store);
        let x0 = g.constant(p.x0.clone());
        let pre = forward::rec_net(&mut g, &rec_bound, &spec.rec, x0, &p.y, &p.mask)?;
        let (h, w) = p.gt.hw()?;
        let as_image = g.reshape(pre, vec![h, w, 1])?;
        let f = forward::seg_net(&mut g, &seg_bound, &spec.seg, as_image, BnMode::Eval)?;
        let cat = forward::mlfa_concat(&mut g, &f.taps)?;
        out.push(g.value(cat).clone());
    }
    Ok(out)
}

/// Fine-tunes the fusion network: the pre-trained cascade and segmenter
/// are frozen (verified bit-identical at every checkpoint), and only the
/// fusion store — copied convolutions, 1×1 fusion convolutions, and the
/// aggregation convolution — is optimized. Checkpoints are composite:
/// `rec/`, `seg/`, `fusion/` under the config directory.
pub fn finetune_sadfn(
    cfg: &TrainConfig,
    spec: &SadfnSpec,
    mut rec_store: ParamStore<f32>,
    mut seg_store: ParamStore<f32>,
    train: &[Sample],
    holdout: &[Sample],
    mask: &SamplingMask,
) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Sadfn)?;
    spec.validate()?;
    rec_store.freeze_all();
    seg_store.freeze_all();
    let mut fusion = init::init_sadfn_fusion::<f32>(spec, &rec_store, &mut rng::stream(cfg.seed, "init"))?;
    let rec_digest = rec_store.byte_digest();
    let seg_digest = seg_store.byte_digest();

    // The frozen half of the pipeline — pre-reconstruction, segmentation,
    // tap upsampling and concatenation — does not depend on any trainable
    // parameter, so its output per training sample is computed once here
    // and replayed as a constant every iteration. Holdout evaluation still
    // runs the full pipeline.
    let frozen_cat = frozen_tap_features(spec, &rec_store, &seg_store, train, mask)?;

    let mut build = |g: &mut Graph<f32>, fusion: &ParamStore<f32>, prep: &[PreparedSample], idx: &[usize]| {
        let bound = Bound::new(g, fusion);
        let mut pairs = Vec::with_capacity(idx.len());
        for &i in idx {
            let x0 = g.constant(prep[i].x0.clone());
            let cat = g.constant(frozen_cat[i].clone());
            let s = forward::mlfa_compress(g, &bound, cat)?;
            let (out, _) =
                forward::fusion_cascade(g, &bound, spec.rec.blocks, x0, s, &prep[i].y, &prep[i].mask)?;
            pairs.push((out, &prep[i].gt));
        }
        let loss = loss_rec(g, &pairs)?;
        Ok((loss, bound))
    };
    let recon = |fusion: &ParamStore<f32>, prep: &PreparedSample| {
        let mut g = Graph::new();
        let bind = SadfnBinding::new(&mut g, &rec_store, &seg_store, fusion)?;
        let x0 = g.constant(prep.x0.clone());
        let f = forward::sadfn_net(&mut g, &bind, spec, x0, &prep.y, &prep.mask)?;
        Ok(g.value(f.output).clone())
    };
    let mut first = true;
    let mut save = |fusion: &ParamStore<f32>| -> Result<()> {
        if rec_store.byte_digest() != rec_digest || seg_store.byte_digest() != seg_digest {
            return Err(Error::Invalid(
                "frozen pre-net parameters changed during fine-tuning".into(),
            ));
        }
        if first {
            rec_store.save(&cfg.checkpoint_dir.join("rec"), &spec.rec.meta())?;
            seg_store.save(&cfg.checkpoint_dir.join("seg"), &spec.seg.meta())?;
            first = false;
        }
        fusion.save(&cfg.checkpoint_dir.join("fusion"), &spec.meta())
    };

    let curve = train_rec_family(cfg, train, holdout, mask, &mut fusion, &mut build, &recon, &mut save)?;
    Ok(TrainOutcome { store: fusion, curve })
}

/// Fine-tunes the reconstruction cascade under the joint objective
/// `loss_rec + λ·loss_seg(segment(reconstruction))` with the segmenter
/// frozen in eval mode. Checkpoints are composite: `rec/` (trained) and
/// `seg/` (frozen copy) under the config directory.
#[allow(clippy::too_many_arguments)]
pub fn finetune_cascade(
    cfg: &TrainConfig,
    rec_spec: &RecNetSpec,
    seg_spec: &SegNetSpec,
    rec_store: ParamStore<f32>,
    mut seg_store: ParamStore<f32>,
    lambda: f64,
    train: &[Sample],
    holdout: &[Sample],
    mask: &SamplingMask,
) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Cascade)?;
    rec_spec.validate()?;
    seg_spec.validate()?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Invalid(format!(
            "segmentation loss weight must be finite and >= 0, got {lambda}"
        )));
    }
    seg_store.freeze_all();
    let seg_digest = seg_store.byte_digest();
    let mut store = rec_store;

    let mut build = |g: &mut Graph<f32>, store: &ParamStore<f32>, prep: &[PreparedSample], idx: &[usize]| {
        let rec_bound = Bound::new(g, store);
        let seg_bound = Bound::new(g, &seg_store);
        let mut pairs = Vec::with_capacity(idx.len());
        let mut seg_total: Option<NodeId> = None;
        for &i in idx {
            let x0 = g.constant(prep[i].x0.clone());
            let out = forward::rec_net(g, &rec_bound, rec_spec, x0, &prep[i].y, &prep[i].mask)?;
            pairs.push((out, &prep[i].gt));
            let (h, w) = prep[i].gt.hw()?;
            let as_image = g.reshape(out, vec![h, w, 1])?;
            let f = forward::seg_net(g, &seg_bound, seg_spec, as_image, BnMode::Eval)?;
            let ce = loss_seg(g, f.probs, &prep[i].labels)?;
            seg_total = Some(match seg_total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
        }
        let rec_loss = loss_rec(g, &pairs)?;
        let seg_scaled = g.scale(seg_total.expect("nonempty batch"), lambda as f32);
        let loss = g.add(rec_loss, seg_scaled)?;
        Ok((loss, rec_bound))
    };
    let recon = |store: &ParamStore<f32>, prep: &PreparedSample| {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store);
        let x0 = g.constant(prep.x0.clone());
        let out = forward::rec_net(&mut g, &bound, rec_spec, x0, &prep.y, &prep.mask)?;
        Ok(g.value(out).clone())
    };
    let mut first = true;
    let mut save = |store: &ParamStore<f32>| -> Result<()> {
        if seg_store.byte_digest() != seg_digest {
            return Err(Error::Invalid(
                "frozen segmenter parameters changed during cascade fine-tuning".into(),
            ));
        }
        if first {
            seg_store.save(&cfg.checkpoint_dir.join("seg"), &seg_spec.meta())?;
            first = false;
        }
        store.save(&cfg.checkpoint_dir.join("rec"), &rec_spec.meta())
    };

    let curve = train_rec_family(cfg, train, holdout, mask, &mut store, &mut build, &recon, &mut save)?;
    Ok(TrainOutcome { store, curve })
}

// -- segmentation pre-training -----------------------------------------------

/// Crop side used for segmentation pre-training: half the shorter image
/// side, rounded down to a multiple of 4 (the segmenter's pooling factor),
/// never below 4.
pub fn seg_crop_side(h: usize, w: usize) -> usize {
    ((h.min(w) / 2) & !3usize).max(4)
}

/// Extracts an aligned square crop of an image/label pair.
fn crop_pair(s: &Sample, r0: usize, c0: usize, side: usize) -> (Vec<f32>, Vec<u32>) {
    let (_, w) = s.label.dims();
    let mut img = Vec::with_capacity(side * side);
    let mut lbl = Vec::with_capacity(side * side);
    for r in r0..r0 + side {
        for c in c0..c0 + side {
            img.push(s.image.data()[r * w + c]);
            lbl.push(u32::from(s.label.get(r, c)));
        }
    }
    (img, lbl)
}

/// Pre-trains the segmenter on randomly cropped, randomly augmented
/// full-sampled patches with summed cross-entropy; batch norm runs in
/// training mode and the running statistics are updated with momentum
/// [`BN_MOMENTUM`] each step. Holdout evaluation reports mean Dice per
/// tissue on full images in eval mode.
pub fn pretrain_seg(
    cfg: &TrainConfig,
    spec: &SegNetSpec,
    init: Option<ParamStore<f32>>,
    train: &[Sample],
    holdout: &[Sample],
) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Seg)?;
    spec.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training needs a nonempty training set".into()));
    }
    let (h, w) = train[0].label.dims();
    for s in train.iter().chain(holdout) {
        if s.label.dims() != (h, w) {
            return Err(Error::Invalid("segmentation training needs uniform image dims".into()));
        }
    }
    let side = seg_crop_side(h, w);
    let mut store = match init {
        Some(s) => s,
        None => init::init_seg::<f32>(spec, &mut rng::stream(cfg.seed, "init"))?,
    };

    let mut opt = Adam::new(cfg.lr as f32, cfg.beta1 as f32, cfg.beta2 as f32)?;
    let mut batch_rng = rng::stream(cfg.seed, "batch");
    let mut curve = Curve::new(&["dice_gm", "dice_wm", "dice_csf"]);

    let eval = |store: &ParamStore<f32>| -> Result<Vec<Option<f64>>> {
        if holdout.is_empty() {
            return Ok(vec![None, None, None]);
        }
        let mut sums = [0.0f64; 3];
        for s in holdout {
            let pred = metrics::segment_image(store, spec, &s.image)?;
            for (slot, (class, _)) in metrics::REPORT_TISSUES.iter().enumerate() {
                sums[slot] += metrics::dice(&pred, &s.label, *class)?;
            }
        }
        Ok(sums.iter().map(|s| Some(s / holdout.len() as f64)).collect())
    };
    let save = |store: &ParamStore<f32>| store.save(&cfg.checkpoint_dir, &spec.meta());

    save(&store)?;
    curve.rows.push(CurveRow {
        iter: 0,
        loss: None,
        metrics: eval(&store)?,
    });

    for i in 1..=cfg.iterations {
        // Assemble the batch: sample, augment, crop — all from the batch
        // stream, in a fixed per-slot draw order.
        let mut img = Vec::with_capacity(cfg.batch * side * side);
        let mut lbl = Vec::with_capacity(cfg.batch * side * side);
        for _ in 0..cfg.batch {
            let idx = batch_rng.gen_range(0..train.len());
            let aug = augment(&train[idx], &mut batch_rng);
            let (ah, aw) = aug.label.dims();
            let r0 = batch_rng.gen_range(0..=ah - side);
            let c0 = batch_rng.gen_range(0..=aw - side);
            let (ci, cl) = crop_pair(&aug, r0, c0, side);
            img.extend(ci);
            lbl.extend(cl);
        }
        let batch = Tensor::new(vec![cfg.batch, side, side, 1], img)?;

        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &store);
        let x = g.constant(batch);
        let f = forward::seg_net(&mut g, &bound, spec, x, BnMode::Train)?;
        let loss = loss_seg(&mut g, f.probs, &lbl)?;
        let loss_v = f64::from(g.value(loss).data()[0]);
        if !loss_v.is_finite() {
            return Err(divergence_error(i, &cfg.checkpoint_dir));
        }
        g.backward(loss)?;

        // Fold this batch's normalization statistics into the running
        // estimates before the parameter step.
        for (site, node) in &f.bn_sites {
            let (bm, bv) = g.bn_batch_stats(*node)?;
            let (bm, bv) = (bm.to_vec(), bv.to_vec());
            let keep = BN_MOMENTUM as f32;
            let mean = store.get_mut(&format!("{site}.mean"))?;
            for (m, b) in mean.tensor.data_mut().iter_mut().zip(&bm) {
                *m = keep * *m + (1.0 - keep) * b;
            }
            let var = store.get_mut(&format!("{site}.var"))?;
            for (v, b) in var.tensor.data_mut().iter_mut().zip(&bv) {
                *v = keep * *v + (1.0 - keep) * b;
            }
        }
        adam_step(&mut opt, &g, &bound, &mut store)?;

        let at_eval = (cfg.eval_every > 0 && i % cfg.eval_every == 0) || i == cfg.iterations;
        let metrics = if at_eval {
            save(&store)?;
            eval(&store)?
        } else {
            vec![None, None, None]
        };
        curve.rows.push(CurveRow {
            iter: i,
            loss: Some(loss_v),
            metrics,
        });
    }
    curve.save(&cfg.checkpoint_dir.join(CURVE_FILE))?;
    Ok(TrainOutcome { store, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::MaskKind;
    use crate::phantom::{generate_dataset, PhantomConfig};

    fn desk_data(n: usize, h: usize) -> (Vec<Sample>, Vec<Sample>, SamplingMask) {
        let cfg = PhantomConfig::with_dims(h, h);
        let all = generate_dataset(&cfg, 11, n + 2).unwrap();
        let (train, holdout) = all.split_at(n);
        let mask = SamplingMask::generate(MaskKind::Cartesian1d, h, h, 0.4, 7).unwrap();
        (train.to_vec(), holdout.to_vec(), mask)
    }

    fn tiny_cfg(stage: Stage, dir: &Path, iterations: usize) -> TrainConfig {
        let mut cfg = TrainConfig::desk(stage, dir);
        cfg.iterations = iterations;
        cfg.batch = 2;
        cfg.eval_every = 0;
        cfg
    }

    #[test]
    fn loss_rec_closed_forms_and_oracle() {
        let mut g = Graph::<f64>::new();
        let gt = Tensor::filled(vec![4, 4], 0.3f64);
        let same = g.constant(gt.clone());
        let zero = loss_rec(&mut g, &[(same, &gt)]).unwrap();
        assert_eq!(g.value(zero).data()[0], 0.0);

        // One pixel off by d in a batch of two -> d²/2.
        let mut off = gt.clone();
        off.data_mut()[5] += 0.25;
        let a = g.constant(off);
        let b = g.constant(gt.clone());
        let l = loss_rec(&mut g, &[(a, &gt), (b, &gt)]).unwrap();
        assert!((g.value(l).data()[0] - 0.25 * 0.25 / 2.0).abs() < 1e-12);

        // Random batch vs direct summation.
        let mut r = rng::stream(1, "data");
        let outs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(vec![5, 5], |_| r.gen::<f64>())).collect();
        let gts: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(vec![5, 5], |_| r.gen::<f64>())).collect();
        let pairs: Vec<(NodeId, &Tensor<f64>)> = outs
            .iter()
            .zip(&gts)
            .map(|(o, t)| (g.constant(o.clone()), t))
            .collect();
        let l = loss_rec(&mut g, &pairs).unwrap();
        let direct: f64 = outs
            .iter()
            .zip(&gts)
            .map(|(o, t)| {
                o.data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.value(l).data()[0] - direct).abs() < 1e-6);
        assert!(loss_rec(&mut g, &[]).is_err());
    }

    #[test]
    fn loss_seg_closed_forms_and_oracle() {
        let mut g = Graph::<f64>::new();
        // Probability 1 on the true class everywhere -> loss 0.
        let mut sure = vec![0.0f64; 2 * 2 * 4];
        let labels = [0u32, 3, 1, 2];
        for (px, &l) in labels.iter().enumerate() {
            sure[px * 4 + l as usize] = 1.0;
        }
        let p = g.constant(Tensor::new(vec![2, 2, 4], sure).unwrap());
        let l = loss_seg(&mut g, p, &labels).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-9);

        // Uniform prediction over 4 classes, P pixels -> P·ln 4.
        let p = g.constant(Tensor::filled(vec![2, 2, 4], 0.25f64));
        let l = loss_seg(&mut g, p, &labels).unwrap();
        assert!((g.value(l).data()[0] - 4.0 * 4.0f64.ln()).abs() < 1e-9);

        // Random distributions vs direct summation.
        let mut r = rng::stream(2, "data");
        let mut probs = Vec::new();
        for _ in 0..8 {
            let raw: Vec<f64> = (0..4).map(|_| r.gen::<f64>() + 0.1).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let labels: Vec<u32> = (0..8).map(|_| r.gen_range(0..4)).collect();
        let t = Tensor::new(vec![2, 4, 4], probs.clone()).unwrap();
        let p = g.constant(t);
        let l = loss_seg(&mut g, p, &labels).unwrap();
        let direct: f64 = labels
            .iter()
            .enumerate()
            .map(|(px, &c)| -(probs[px * 4 + c as usize].ln()))
            .sum();
        assert!((g.value(l).data()[0] - direct).abs() < 1e-6);

        // Out-of-range label rejected.
        let p = g.constant(Tensor::filled(vec![2, 2, 4], 0.25f64));
        assert!(loss_seg(&mut g, p, &[0, 1, 2, 4]).is_err());
    }

    #[test]
    fn zero_iterations_leave_initialization() {
        let (train, holdout, mask) = desk_data(3, 16);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(Stage::Rec, dir.path(), 0);
        let spec = RecNetSpec { blocks: 1, width: 2 };
        let fresh = init::init_rec::<f32>(&spec, &mut rng::stream(cfg.seed, "init")).unwrap();
        let out = pretrain_rec(&cfg, &spec, None, &train, &holdout, &mask).unwrap();
        assert_eq!(out.store.byte_digest(), fresh.byte_digest());
        assert_eq!(out.curve.rows.len(), 1);
        // The checkpoint on disk also equals the initialization.
        let (loaded, _) = ParamStore::<f32>::load(dir.path()).unwrap();
        assert_eq!(loaded.byte_digest(), fresh.byte_digest());
    }

    #[test]
    fn rec_training_is_reproducible_and_decreases_loss() {
        let (train, holdout, mask) = desk_data(3, 16);
        let spec = RecNetSpec { blocks: 1, width: 4 };
        let run = |dir: &Path| {
            let mut cfg = tiny_cfg(Stage::Rec, dir, 40);
            cfg.eval_every = 20;
            pretrain_rec(&cfg, &spec, None, &train, &holdout, &mask).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (o1, o2) = (run(d1.path()), run(d2.path()));
        assert_eq!(o1.curve.to_csv_string(), o2.curve.to_csv_string());
        assert_eq!(o1.store.byte_digest(), o2.store.byte_digest());
        let csv = std::fs::read_to_string(d1.path().join(CURVE_FILE)).unwrap();
        assert!(csv.starts_with("iter,loss,psnr,ssim\n"));
        assert_eq!(o1.curve.eval_rows().count(), 3); // iters 0, 20, 40
    }

    #[test]
    fn single_sample_overfit_strictly_decreases_loss() {
        let (train, _, mask) = desk_data(1, 16);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(Stage::Rec, dir.path(), 200);
        let spec = RecNetSpec { blocks: 1, width: 4 };
        let out = pretrain_rec(&cfg, &spec, None, &train[..1], &[], &mask).unwrap();
        let losses = out.curve.losses();
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert!(
            last < first * 0.5,
            "overfit loss did not halve: {first} -> {last}"
        );
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn divergent_learning_rate_aborts_with_checkpoint_on_disk() {
        let (train, _, mask) = desk_data(2, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(Stage::Rec, dir.path(), 200);
        cfg.lr = 1e8;
        let spec = RecNetSpec { blocks: 1, width: 4 };
        let err = pretrain_rec(&cfg, &spec, None, &train, &[], &mask).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("iteration") || msg.contains("not finite") || msg.contains("non-finite"),
            "unexpected divergence error: {msg}"
        );
        // The last good checkpoint is still loadable.
        assert!(ParamStore::<f32>::load(dir.path()).is_ok());
    }

    #[test]
    fn seg_training_updates_running_stats_and_is_reproducible() {
        let (train, holdout, _) = desk_data(3, 16);
        let spec = SegNetSpec { width: 2, classes: 4 };
        let run = |dir: &Path| {
            let mut cfg = tiny_cfg(Stage::Seg, dir, 10);
            cfg.eval_every = 5;
            pretrain_seg(&cfg, &spec, None, &train, &holdout).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (o1, o2) = (run(d1.path()), run(d2.path()));
        assert_eq!(o1.curve.to_csv_string(), o2.curve.to_csv_string());
        assert_eq!(o1.store.byte_digest(), o2.store.byte_digest());

        // Running statistics moved off their 0/1 initialization and the
        // curve carries the per-tissue Dice columns.
        let mean = o1.store.get("conv1.bn.mean").unwrap();
        assert!(mean.tensor.data().iter().any(|v| v.abs() > 1e-6));
        assert!(!mean.trainable);
        assert!(o1.curve.to_csv_string().starts_with("iter,loss,dice_gm,dice_wm,dice_csf\n"));
    }

    #[test]
    fn cascade_with_zero_weight_matches_continued_pretraining() {
        let (train, holdout, mask) = desk_data(3, 16);
        let rec_spec = RecNetSpec { blocks: 1, width: 2 };
        let seg_spec = SegNetSpec { width: 2, classes: 4 };

        // A short pre-training run to produce the shared starting point.
        let d0 = tempfile::tempdir().unwrap();
        let start = pretrain_rec(
            &tiny_cfg(Stage::Rec, d0.path(), 5),
            &rec_spec,
            None,
            &train,
            &[],
            &mask,
        )
        .unwrap()
        .store;
        let seg_store = init::init_seg::<f32>(&seg_spec, &mut rng::stream(9, "init")).unwrap();
        let mut seg_frozen = seg_store.cast::<f32>();
        seg_frozen.freeze_all();

        // Identical hyperparameters for both routes (the desk presets
        // differ in learning rate between stages).
        let d1 = tempfile::tempdir().unwrap();
        let continued = pretrain_rec(
            &tiny_cfg(Stage::Rec, d1.path(), 5),
            &rec_spec,
            Some(start.cast::<f32>()),
            &train,
            &holdout,
            &mask,
        )
        .unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut cascade_cfg = tiny_cfg(Stage::Cascade, d2.path(), 5);
        cascade_cfg.lr = tiny_cfg(Stage::Rec, d2.path(), 5).lr;
        let cascade = finetune_cascade(
            &cascade_cfg,
            &rec_spec,
            &seg_spec,
            start.cast::<f32>(),
            seg_store.cast::<f32>(),
            0.0,
            &train,
            &holdout,
            &mask,
        )
        .unwrap();

        // Degenerate weight: the update sequence is identical, so the
        // trained parameters agree byte for byte and the loss curves match.
        assert_eq!(continued.store.byte_digest(), cascade.store.byte_digest());
        for (a, b) in continued.curve.losses().iter().zip(cascade.curve.losses()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        // The frozen segmenter is bit-identical on disk.
        let (seg_after, _) = ParamStore::<f32>::load(&d2.path().join("seg")).unwrap();
        assert_eq!(seg_after.byte_digest(), seg_frozen.byte_digest());
        assert!(finetune_cascade(
            &tiny_cfg(Stage::Cascade, d2.path(), 1),
            &rec_spec,
            &seg_spec,
            start.cast::<f32>(),
            seg_store,
            -1.0,
            &train,
            &holdout,
            &mask,
        )
        .is_err());
    }

    #[test]
    fn sadfn_finetune_keeps_pre_nets_frozen_and_saves_composite() {
        let (train, holdout, mask) = desk_data(3, 16);
        let spec = SadfnSpec {
            rec: RecNetSpec { blocks: 1, width: 2 },
            seg: SegNetSpec { width: 2, classes: 4 },
        };
        let mut rec_store = init::init_rec::<f32>(&spec.rec, &mut rng::stream(3, "init")).unwrap();
        let mut seg_store = init::init_seg::<f32>(&spec.seg, &mut rng::stream(4, "init")).unwrap();
        rec_store.freeze_all();
        seg_store.freeze_all();
        let rec_digest = rec_store.byte_digest();
        let seg_digest = seg_store.byte_digest();
        let fusion_init =
            init::init_sadfn_fusion::<f32>(&spec, &rec_store, &mut rng::stream(1, "init")).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(Stage::Sadfn, dir.path(), 6);
        cfg.eval_every = 3;
        let out = finetune_sadfn(&cfg, &spec, rec_store, seg_store, &train, &holdout, &mask).unwrap();

        // The fusion store moved; the frozen sub-checkpoints match the
        // original pre-net bytes.
        assert_ne!(out.store.byte_digest(), fusion_init.byte_digest());
        let (rec_after, _) = ParamStore::<f32>::load(&dir.path().join("rec")).unwrap();
        let (seg_after, _) = ParamStore::<f32>::load(&dir.path().join("seg")).unwrap();
        assert_eq!(rec_after.byte_digest(), rec_digest);
        assert_eq!(seg_after.byte_digest(), seg_digest);
        let (fusion_after, meta) = ParamStore::<f32>::load(&dir.path().join("fusion")).unwrap();
        assert_eq!(fusion_after.byte_digest(), out.store.byte_digest());
        assert_eq!(meta.get("kind").map(String::as_str), Some("fusion"));
        // Metrics exist at the start row (monotone-safety is judged
        // against this iteration-0 value downstream).
        assert!(out.curve.rows[0].metrics[0].is_some());
    }

    #[test]
    fn cached_tap_features_reproduce_full_forward_loss_exactly() {
        let (train, _, mask) = desk_data(3, 16);
        let spec = SadfnSpec {
            rec: RecNetSpec { blocks: 1, width: 2 },
            seg: SegNetSpec { width: 2, classes: 4 },
        };
        let mut rec_store = init::init_rec::<f32>(&spec.rec, &mut rng::stream(3, "init")).unwrap();
        let mut seg_store = init::init_seg::<f32>(&spec.seg, &mut rng::stream(4, "init")).unwrap();
        rec_store.freeze_all();
        seg_store.freeze_all();
        let fusion =
            init::init_sadfn_fusion::<f32>(&spec, &rec_store, &mut rng::stream(1, "init")).unwrap();
        let prep = prepare(&train, &mask).unwrap();
        let idx = [0usize, 2];

        // Full pipeline forward, frozen halves recomputed in-graph.
        let mut g1 = Graph::new();
        let bind = SadfnBinding::new(&mut g1, &rec_store, &seg_store, &fusion).unwrap();
        let mut pairs = Vec::new();
        for &i in &idx {
            let x0 = g1.constant(prep[i].x0.clone());
            let f = forward::sadfn_net(&mut g1, &bind, &spec, x0, &prep[i].y, &prep[i].mask).unwrap();
            pairs.push((f.output, &prep[i].gt));
        }
        let full_loss = loss_rec(&mut g1, &pairs).unwrap();
        let full_v = g1.value(full_loss).data()[0];

        // Cached-tap forward as used by fine-tuning iterations.
        let cats = frozen_tap_features(&spec, &rec_store, &seg_store, &train, &mask).unwrap();
        let mut g2 = Graph::new();
        let bound = Bound::new(&mut g2, &fusion);
        let mut pairs = Vec::new();
        for &i in &idx {
            let x0 = g2.constant(prep[i].x0.clone());
            let cat = g2.constant(cats[i].clone());
            let s = forward::mlfa_compress(&mut g2, &bound, cat).unwrap();
            let (out, _) = forward::fusion_cascade(
                &mut g2,
                &bound,
                spec.rec.blocks,
                x0,
                s,
                &prep[i].y,
                &prep[i].mask,
            )
            .unwrap();
            pairs.push((out, &prep[i].gt));
        }
        let cached_loss = loss_rec(&mut g2, &pairs).unwrap();
        let cached_v = g2.value(cached_loss).data()[0];

        assert_eq!(full_v.to_bits(), cached_v.to_bits(), "{full_v} vs {cached_v}");

        // Gradients of the trainable parameters agree bit for bit too.
        g1.backward(full_loss).unwrap();
        g2.backward(cached_loss).unwrap();
        for ((n1, id1), (n2, id2)) in bind.fusion.ids().zip(bound.ids()) {
            assert_eq!(n1, n2);
            let g1v = g1.grad(id1);
            let g2v = g2.grad(id2);
            match (g1v, g2v) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        assert_eq!(x.to_bits(), y.to_bits(), "{n1}");
                    }
                }
                (None, None) => {}
                _ => panic!("gradient presence differs for {n1}"),
            }
        }
    }

    #[test]
    fn config_presets_validate_and_scale() {
        for stage in [Stage::Rec, Stage::Seg, Stage::Sadfn, Stage::Cascade, Stage::Wos] {
            TrainConfig::full_scale(stage, "ck").validate().unwrap();
            TrainConfig::desk(stage, "ck").validate().unwrap();
            assert_eq!(Stage::parse(stage.tag()).unwrap(), stage);
        }
        let full = TrainConfig::full_scale(Stage::Rec, "ck");
        let shrunk = full.clone().scaled(0.01);
        assert_eq!(shrunk.iterations, 320);
        assert!((shrunk.scale - 0.01).abs() < 1e-12);
        let mut bad = full.clone();
        bad.batch = 0;
        assert!(bad.validate().is_err());
        let mut bad = full.clone();
        bad.lr = 0.0;
        assert!(bad.validate().is_err());
        // Stage mismatch between config and driver is rejected.
        let (train, _, mask) = desk_data(1, 16);
        let err = pretrain_rec(
            &tiny_cfg(Stage::Seg, Path::new("ck"), 1),
            &RecNetSpec { blocks: 1, width: 2 },
            None,
            &train,
            &[],
            &mask,
        );
        assert!(err.is_err());
        assert!(Stage::parse("nope").is_err());
    }
}
