//! Tape builders assembling forward passes from parameter stores.
//!
//! A [`Bound`] pins every parameter of a [`ParamStore`] into a graph as a
//! leaf (trainable parameters with gradients enabled), after which the
//! builder functions wire layers by parameter name. Builders are pure:
//! given the same parameters and inputs they produce the same values, and
//! they may be called several times on one graph to batch losses over
//! shared parameter leaves.

use super::params::ParamStore;
use super::{RecNetSpec, SadfnSpec, SegNetSpec, WosSpec};
use crate::mri::{ComplexGrid, DataFidelityOp, SamplingMask};
use crate::tensor::{BnMode, Graph, NodeId};
use crate::{Error, Real, Result};
use indexmap::IndexMap;
use std::sync::Arc;

/// Per-channel batch-norm stabilizer added to variances.
pub const BN_EPS: f64 = 1e-5;

/// A parameter store bound into a graph: one leaf per parameter,
/// gradient-enabled exactly when the parameter is trainable.
#[derive(Debug)]
pub struct Bound {
    ids: IndexMap<String, NodeId>,
}

impl Bound {
    /// Binds every parameter of `store` as a graph leaf.
    pub fn new<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>) -> Bound {
        let mut ids = IndexMap::new();
        for (name, p) in store.iter() {
            let mut t = p.tensor.clone();
            t.requires_grad = p.trainable;
            t.grad = None;
            ids.insert(name.to_string(), g.leaf(t));
        }
        Bound { ids }
    }

    /// Binds every parameter of `store` except `name`, which maps to an
    /// existing graph node instead (it must match the stored shape). Used
    /// to differentiate a network with respect to one chosen parameter.
    pub fn with_override<T: Real>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        name: &str,
        node: NodeId,
    ) -> Result<Bound> {
        let stored = store.get(name)?;
        if g.value(node).shape() != stored.tensor.shape() {
            return Err(Error::shape(
                "parameter override",
                format!("{:?}", stored.tensor.shape()),
                format!("{:?}", g.value(node).shape()),
            ));
        }
        let mut ids = IndexMap::new();
        for (pname, p) in store.iter() {
            if pname == name {
                ids.insert(pname.to_string(), node);
                continue;
            }
            let mut t = p.tensor.clone();
            t.requires_grad = p.trainable;
            t.grad = None;
            ids.insert(pname.to_string(), g.leaf(t));
        }
        Ok(Bound { ids })
    }

    /// Node of a parameter; unknown names are rejected.
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unbound parameter name {name}")))
    }

    /// Iterates `(name, node)` in store order.
    pub fn ids(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn conv_relu<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    let h = g.conv2d(x, p.id(&format!("{name}.weight"))?, p.id(&format!("{name}.bias"))?)?;
    Ok(g.relu(h))
}

fn image_dims<T: Real>(g: &Graph<T>, x: NodeId, context: &str) -> Result<(usize, usize)> {
    let shape = g.value(x).shape();
    match shape {
        [h, w] => Ok((*h, *w)),
        _ => Err(Error::shape(context, "[H, W] image", format!("{shape:?}"))),
    }
}

/// Appends one residual reconstruction block: five convolutions on the
/// current image, residual add, then data fidelity. With `seg_feat`
/// present, each of the four hidden conv outputs is fused with it through
/// the block's 1×1 fusion convolutions.
fn cascade_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: NodeId,
    seg_feat: Option<NodeId>,
    y: &Arc<ComplexGrid<T>>,
    mask: &Arc<SamplingMask>,
) -> Result<NodeId> {
    let (h, w) = image_dims(g, x, "reconstruction block input")?;
    let mut feat = g.reshape(x, vec![h, w, 1])?;
    for i in 1..=4 {
        feat = conv_relu(g, p, &format!("{prefix}.conv{i}"), feat)?;
        if let Some(s) = seg_feat {
            let wf = p.id(&format!("{prefix}.fuse{i}.weight"))?;
            let bf = p.id(&format!("{prefix}.fuse{i}.bias"))?;
            feat = fusion_layer(g, feat, s, wf, bf)?;
        }
    }
    let resid = g.conv2d(
        feat,
        p.id(&format!("{prefix}.conv5.weight"))?,
        p.id(&format!("{prefix}.conv5.bias"))?,
    )?;
    let resid = g.reshape(resid, vec![h, w])?;
    let sum = g.add(x, resid)?;
    g.apply_custom(Box::new(DataFidelityOp::new(Arc::clone(y), Arc::clone(mask))?), &[sum])
}

/// Runs the reconstruction cascade on a zero-filled image `x0` (`[H, W]`).
/// Every block ends in a data-fidelity layer against `y`, so the output's
/// k-space equals `y` at sampled frequencies.
pub fn rec_net<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    spec: &RecNetSpec,
    x0: NodeId,
    y: &Arc<ComplexGrid<T>>,
    mask: &Arc<SamplingMask>,
) -> Result<NodeId> {
    spec.validate()?;
    let mut x = x0;
    for b in 0..spec.blocks {
        x = cascade_block(g, p, &format!("block{b}"), x, None, y, mask)?;
    }
    Ok(x)
}

/// Fuses a reconstruction feature map with the shared segmentation feature
/// tensor: channel concat to `2F`, 1×1 convolution back to `F`, ReLU.
/// Both inputs must agree in spatial dims and width.
pub fn fusion_layer<T: Real>(
    g: &mut Graph<T>,
    rec_feat: NodeId,
    seg_feat: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let a = g.value(rec_feat).shape().to_vec();
    let b = g.value(seg_feat).shape().to_vec();
    if a != b {
        return Err(Error::shape(
            "fusion_layer",
            format!("matching feature shapes, reconstruction side {a:?}"),
            format!("segmentation side {b:?}"),
        ));
    }
    let cat = g.concat_channels(&[rec_feat, seg_feat])?;
    let h = g.conv2d(cat, weight, bias)?;
    Ok(g.relu(h))
}

/// Everything a segmenter forward exposes.
#[derive(Debug)]
pub struct SegForward {
    /// Per-pixel class probabilities `[.., H, W, C]`.
    pub probs: NodeId,
    /// Pre-softmax class scores, same shape.
    pub logits: NodeId,
    /// Post-activation outputs of the ten hidden convolutions, at native
    /// resolutions, encoder to decoder.
    pub taps: Vec<NodeId>,
    /// Training mode only: `(site, node)` per batch-norm, for
    /// running-statistics updates. Site names the parameter group, e.g.
    /// `conv3.bn`.
    pub bn_sites: Vec<(String, NodeId)>,
}

/// Runs the segmenter on `x` (`[H, W, 1]` or `[B, H, W, 1]`; spatial dims
/// divisible by 4). Training mode normalizes by batch statistics and
/// reports them in [`SegForward::bn_sites`]; eval mode normalizes by the
/// stored running statistics.
pub fn seg_net<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    spec: &SegNetSpec,
    x: NodeId,
    mode: BnMode,
) -> Result<SegForward> {
    spec.validate()?;
    let shape = g.value(x).shape().to_vec();
    let (h, w) = match shape[..] {
        [h, w, 1] => (h, w),
        [_, h, w, 1] => (h, w),
        _ => {
            return Err(Error::shape(
                "segmenter input",
                "[H, W, 1] or [B, H, W, 1]",
                format!("{shape:?}"),
            ))
        }
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Invalid(format!(
            "segmenter input dims must be divisible by 4 (two pooling levels), got {h}x{w}"
        )));
    }

    let mut bn_sites = Vec::new();
    let eps = T::from_f64(BN_EPS);
    let cbr = |g: &mut Graph<T>, name: &str, x: NodeId, transposed: bool, sites: &mut Vec<(String, NodeId)>| -> Result<NodeId> {
        let wgt = p.id(&format!("{name}.weight"))?;
        let bias = p.id(&format!("{name}.bias"))?;
        let conv = if transposed {
            g.conv2d_transposed(x, wgt, bias)?
        } else {
            g.conv2d(x, wgt, bias)?
        };
        let gamma = p.id(&format!("{name}.bn.gamma"))?;
        let beta = p.id(&format!("{name}.bn.beta"))?;
        let bn = match mode {
            BnMode::Train => g.batchnorm_train(conv, gamma, beta, eps)?,
            BnMode::Eval => {
                let mean = p.id(&format!("{name}.bn.mean"))?;
                let var = p.id(&format!("{name}.bn.var"))?;
                g.batchnorm_eval(conv, gamma, beta, mean, var, eps)?
            }
        };
        sites.push((format!("{name}.bn"), bn));
        Ok(g.relu(bn))
    };

    // Encoder.
    let c1 = cbr(g, "conv1", x, false, &mut bn_sites)?;
    let c2 = cbr(g, "conv2", c1, false, &mut bn_sites)?;
    let p1 = g.maxpool2(c2)?;
    let c3 = cbr(g, "conv3", p1, false, &mut bn_sites)?;
    let c4 = cbr(g, "conv4", c3, false, &mut bn_sites)?;
    let p2 = g.maxpool2(c4)?;
    let c5 = cbr(g, "conv5", p2, false, &mut bn_sites)?;
    let c6 = cbr(g, "conv6", c5, false, &mut bn_sites)?;
    // Decoder with skip concatenations.
    let d1 = cbr(g, "deconv1", c6, true, &mut bn_sites)?;
    let s1 = g.concat_channels(&[d1, c4])?;
    let c7 = cbr(g, "conv7", s1, false, &mut bn_sites)?;
    let c8 = cbr(g, "conv8", c7, false, &mut bn_sites)?;
    let d2 = cbr(g, "deconv2", c8, true, &mut bn_sites)?;
    let s2 = g.concat_channels(&[d2, c2])?;
    let c9 = cbr(g, "conv9", s2, false, &mut bn_sites)?;
    let c10 = cbr(g, "conv10", c9, false, &mut bn_sites)?;
    // Class head: plain conv, no normalization, channel softmax.
    let logits = g.conv2d(c10, p.id("conv11.weight")?, p.id("conv11.bias")?)?;
    let probs = g.softmax_channels(logits)?;

    Ok(SegForward {
        probs,
        logits,
        taps: vec![c1, c2, c3, c4, c5, c6, c7, c8, c9, c10],
        bn_sites,
    })
}

/// Aggregates the ten segmenter taps into one full-resolution feature
/// tensor: bilinear-upsample every tap to the first tap's resolution,
/// concatenate along channels, compress with the `mlfa` 1×1 convolution,
/// ReLU.
pub fn mlfa_aggregate<T: Real>(g: &mut Graph<T>, p: &Bound, taps: &[NodeId]) -> Result<NodeId> {
    let cat = mlfa_concat(g, taps)?;
    mlfa_compress(g, p, cat)
}

/// Parameter-free first half of tap aggregation: upsamples every tap to
/// the first tap's resolution and concatenates along channels. The result
/// depends only on the (frozen) segmenter, so fine-tuning drivers may
/// compute it once per sample and replay it as a constant.
pub fn mlfa_concat<T: Real>(g: &mut Graph<T>, taps: &[NodeId]) -> Result<NodeId> {
    if taps.len() != 10 {
        return Err(Error::Invalid(format!(
            "feature aggregation expects the 10 segmenter taps, got {}",
            taps.len()
        )));
    }
    let full = g.value(taps[0]).shape().to_vec();
    let (fh, fw) = match full[..] {
        [h, w, _] => (h, w),
        [_, h, w, _] => (h, w),
        _ => return Err(Error::shape("feature aggregation tap", "rank 3 or 4", format!("{full:?}"))),
    };
    let spatial = |shape: &[usize]| match shape {
        [h, w, _] => (*h, *w),
        [_, h, w, _] => (*h, *w),
        _ => (0, 0),
    };
    let mut ups = Vec::with_capacity(taps.len());
    for (i, &tap) in taps.iter().enumerate() {
        let mut t = tap;
        let (mut th, mut tw) = spatial(g.value(t).shape());
        while (th, tw) != (fh, fw) {
            if th == 0 || th > fh || fh % th != 0 || tw > fw {
                return Err(Error::shape(
                    "feature aggregation",
                    format!("tap {i} upsamplable to {fh}x{fw}"),
                    format!("{th}x{tw}"),
                ));
            }
            t = g.upsample_bilinear2x(t)?;
            th *= 2;
            tw *= 2;
        }
        ups.push(t);
    }
    g.concat_channels(&ups)
}

/// Trainable second half of tap aggregation: compresses the concatenated
/// tap tensor with the `mlfa` 1×1 convolution and applies ReLU.
pub fn mlfa_compress<T: Real>(g: &mut Graph<T>, p: &Bound, cat: NodeId) -> Result<NodeId> {
    let agg = g.conv2d(cat, p.id("mlfa.weight")?, p.id("mlfa.bias")?)?;
    Ok(g.relu(agg))
}

/// The three stores of the fusion pipeline bound into one graph, with the
/// pre-trained reconstruction and segmentation stores verified frozen.
#[derive(Debug)]
pub struct SadfnBinding {
    /// Frozen pre-trained reconstruction cascade.
    pub rec: Bound,
    /// Frozen pre-trained segmenter.
    pub seg: Bound,
    /// Trainable fusion network (copied convs, fusion convs, aggregation).
    pub fusion: Bound,
}

impl SadfnBinding {
    /// Binds the three stores; any trainable parameter in the two
    /// pre-trained stores is rejected.
    pub fn new<T: Real>(
        g: &mut Graph<T>,
        rec_store: &ParamStore<T>,
        seg_store: &ParamStore<T>,
        fusion_store: &ParamStore<T>,
    ) -> Result<SadfnBinding> {
        if !rec_store.all_frozen() {
            return Err(Error::Invalid(
                "pre-trained reconstruction store must be fully frozen for fusion fine-tuning".into(),
            ));
        }
        if !seg_store.all_frozen() {
            return Err(Error::Invalid(
                "pre-trained segmentation store must be fully frozen for fusion fine-tuning".into(),
            ));
        }
        Ok(SadfnBinding {
            rec: Bound::new(g, rec_store),
            seg: Bound::new(g, seg_store),
            fusion: Bound::new(g, fusion_store),
        })
    }
}

/// Nodes exposed by a fusion-network forward.
#[derive(Debug)]
pub struct SadfnForward {
    /// Final reconstruction `[H, W]`.
    pub output: NodeId,
    /// Frozen pre-reconstructor's output, the segmenter's input.
    pub pre_recon: NodeId,
    /// Frozen segmenter's class probabilities on the pre-reconstruction.
    pub seg_probs: NodeId,
    /// Shared aggregated segmentation feature tensor `[H, W, F]`.
    pub seg_feat: NodeId,
    /// `(site, node)` per fusion site, e.g. `("block0.fuse2", ..)`, for
    /// feature dumps.
    pub fused: Vec<(String, NodeId)>,
}

/// Runs the full fusion pipeline on a zero-filled image `x0`:
/// frozen pre-reconstruction, frozen segmentation of it, feature
/// aggregation, then the fusion cascade on `x0` where every hidden conv
/// output is fused with the shared segmentation features. Gradients reach
/// only the fusion store's parameters.
pub fn sadfn_net<T: Real>(
    g: &mut Graph<T>,
    bind: &SadfnBinding,
    spec: &SadfnSpec,
    x0: NodeId,
    y: &Arc<ComplexGrid<T>>,
    mask: &Arc<SamplingMask>,
) -> Result<SadfnForward> {
    spec.validate()?;
    let (h, w) = image_dims(g, x0, "fusion pipeline input")?;
    let pre = rec_net(g, &bind.rec, &spec.rec, x0, y, mask)?;
    let seg_in = g.reshape(pre, vec![h, w, 1])?;
    let seg = seg_net(g, &bind.seg, &spec.seg, seg_in, BnMode::Eval)?;
    let s = mlfa_aggregate(g, &bind.fusion, &seg.taps)?;
    let (x, fused) = fusion_cascade(g, &bind.fusion, spec.rec.blocks, x0, s, y, mask)?;

    Ok(SadfnForward {
        output: x,
        pre_recon: pre,
        seg_probs: seg.probs,
        seg_feat: s,
        fused,
    })
}

/// Runs the fusion cascade given an already aggregated segmentation
/// feature tensor `seg_feat`: per block, four conv/fusion pairs on the
/// current image, residual add, data fidelity. Returns the final image
/// and the per-site fusion outputs.
pub fn fusion_cascade<T: Real>(
    g: &mut Graph<T>,
    fusion: &Bound,
    blocks: usize,
    x0: NodeId,
    seg_feat: NodeId,
    y: &Arc<ComplexGrid<T>>,
    mask: &Arc<SamplingMask>,
) -> Result<(NodeId, Vec<(String, NodeId)>)> {
    let (h, w) = image_dims(g, x0, "fusion cascade input")?;
    let mut fused = Vec::new();
    let mut x = x0;
    for b in 0..blocks {
        let prefix = format!("block{b}");
        // Inline of cascade_block, recording each fusion site's output.
        let mut feat = g.reshape(x, vec![h, w, 1])?;
        for i in 1..=4 {
            feat = conv_relu(g, fusion, &format!("{prefix}.conv{i}"), feat)?;
            let wf = fusion.id(&format!("{prefix}.fuse{i}.weight"))?;
            let bf = fusion.id(&format!("{prefix}.fuse{i}.bias"))?;
            feat = fusion_layer(g, feat, seg_feat, wf, bf)?;
            fused.push((format!("{prefix}.fuse{i}"), feat));
        }
        let resid = g.conv2d(
            feat,
            fusion.id(&format!("{prefix}.conv5.weight"))?,
            fusion.id(&format!("{prefix}.conv5.bias"))?,
        )?;
        let resid = g.reshape(resid, vec![h, w])?;
        let sum = g.add(x, resid)?;
        x = g.apply_custom(Box::new(DataFidelityOp::new(Arc::clone(y), Arc::clone(mask))?), &[sum])?;
    }
    Ok((x, fused))
}

/// Runs the width-matched control cascade: per block, four wide-3×3 /
/// narrow-1×1 conv pairs, a single-channel conv, residual add, data
/// fidelity.
pub fn wos_net<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    spec: &WosSpec,
    x0: NodeId,
    y: &Arc<ComplexGrid<T>>,
    mask: &Arc<SamplingMask>,
) -> Result<NodeId> {
    spec.validate()?;
    let (h, w) = image_dims(g, x0, "control cascade input")?;
    let mut x = x0;
    for b in 0..spec.blocks {
        let prefix = format!("block{b}");
        let mut feat = g.reshape(x, vec![h, w, 1])?;
        for i in 1..=8 {
            feat = conv_relu(g, p, &format!("{prefix}.conv{i}"), feat)?;
        }
        let resid = g.conv2d(
            feat,
            p.id(&format!("{prefix}.conv9.weight"))?,
            p.id(&format!("{prefix}.conv9.bias"))?,
        )?;
        let resid = g.reshape(resid, vec![h, w])?;
        let sum = g.add(x, resid)?;
        x = g.apply_custom(Box::new(DataFidelityOp::new(Arc::clone(y), Arc::clone(mask))?), &[sum])?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::{fft, undersample, zero_filled, MaskKind};
    use crate::net::init;
    use crate::rng;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn test_setup<T: Real>(
        h: usize,
        w: usize,
        seed: u64,
    ) -> (Tensor<T>, Arc<ComplexGrid<T>>, Arc<SamplingMask>, Tensor<T>) {
        let mask = Arc::new(SamplingMask::generate(MaskKind::Random2d, h, w, 0.4, seed).unwrap());
        let mut r = rng::stream(seed, "data");
        let x = Tensor::<T>::from_fn(vec![h, w], |_| T::from_f64(r.gen::<f64>()));
        let y = Arc::new(undersample(&x, &mask).unwrap());
        let x0 = zero_filled(&y, &mask).unwrap();
        (x, y, mask, x0)
    }

    #[test]
    fn zero_weight_cascade_is_pure_data_fidelity() {
        let (_, y, mask, x0) = test_setup::<f64>(8, 8, 3);
        let spec = RecNetSpec { blocks: 1, width: 4 };
        let mut store = init::init_rec::<f64>(&spec, &mut rng::stream(0, "init")).unwrap();
        for (_, p) in store.iter_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &store);
        let x0n = g.constant(x0.clone());
        let out = rec_net(&mut g, &b, &spec, x0n, &y, &mask).unwrap();

        let df = crate::mri::data_fidelity(&x0, &y, &mask).unwrap();
        for (a, b) in g.value(out).data().iter().zip(df.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cascade_output_matches_measurements_at_sampled_frequencies() {
        let (_, y, mask, x0) = test_setup::<f64>(16, 16, 5);
        let spec = RecNetSpec { blocks: 2, width: 4 };
        let store = init::init_rec::<f64>(&spec, &mut rng::stream(1, "init")).unwrap();
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &store);
        let x0n = g.constant(x0);
        let out = rec_net(&mut g, &b, &spec, x0n, &y, &mask).unwrap();

        let k = fft::fft2(&ComplexGrid::from_real(g.value(out)).unwrap());
        let mut worst = 0.0f64;
        for (i, (kv, yv)) in k.data().iter().zip(y.data()).enumerate() {
            if mask.flags()[i] {
                worst = worst.max((kv - yv).norm());
            }
        }
        assert!(worst < 1e-6, "sampled k-space deviates by {worst}");
    }

    #[test]
    fn unbound_parameter_name_is_rejected() {
        let (_, y, mask, x0) = test_setup::<f32>(8, 8, 7);
        let spec = RecNetSpec { blocks: 2, width: 4 };
        // Store initialized for fewer blocks than the spec demands.
        let store = init::init_rec::<f32>(&RecNetSpec { blocks: 1, width: 4 }, &mut rng::stream(1, "init")).unwrap();
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &store);
        let x0n = g.constant(x0);
        let err = rec_net(&mut g, &b, &spec, x0n, &y, &mask).unwrap_err();
        assert!(err.to_string().contains("unbound parameter name"), "{err}");
    }

    #[test]
    fn segmenter_probabilities_sum_to_one_and_taps_are_ordered() {
        let spec = SegNetSpec { width: 4, classes: 4 };
        let store = init::init_seg::<f32>(&spec, &mut rng::stream(2, "init")).unwrap();
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &store);
        let mut r = rng::stream(3, "data");
        let img = Tensor::from_fn(vec![8, 8, 1], |_| r.gen::<f32>());
        let x = g.constant(img);
        let f = seg_net(&mut g, &b, &spec, x, BnMode::Train).unwrap();

        assert_eq!(g.value(f.probs).shape(), [8, 8, 4]);
        for px in 0..64 {
            let s: f32 = (0..4).map(|c| g.value(f.probs).data()[px * 4 + c]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let want = spec.tap_channels();
        let dims: Vec<[usize; 3]> = [8, 8, 4, 4, 2, 2, 4, 4, 8, 8]
            .iter()
            .zip(want.iter())
            .map(|(&sp, &c)| [sp, sp, c])
            .collect();
        for (i, (&tap, want_shape)) in f.taps.iter().zip(&dims).enumerate() {
            assert_eq!(g.value(tap).shape(), *want_shape, "tap {i}");
        }
        // All twelve normalization sites report batch statistics.
        assert_eq!(f.bn_sites.len(), 12);
        for (name, node) in &f.bn_sites {
            assert!(g.bn_batch_stats(*node).is_ok(), "{name}");
        }
    }

    #[test]
    fn segmenter_rejects_indivisible_dims_and_bad_rank() {
        let spec = SegNetSpec { width: 4, classes: 4 };
        let store = init::init_seg::<f32>(&spec, &mut rng::stream(2, "init")).unwrap();
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &store);
        let x = g.constant(Tensor::zeros(vec![6, 6, 1]));
        assert!(seg_net(&mut g, &b, &spec, x, BnMode::Train).is_err());
        let x = g.constant(Tensor::zeros(vec![8, 8]));
        assert!(seg_net(&mut g, &b, &spec, x, BnMode::Train).is_err());
    }

    #[test]
    fn degenerate_class_conv_gives_uniform_probabilities() {
        let spec = SegNetSpec { width: 4, classes: 4 };
        let mut store = init::init_seg::<f64>(&spec, &mut rng::stream(2, "init")).unwrap();
        store.get_mut("conv11.weight").unwrap().tensor.data_mut().fill(0.0);
        store.get_mut("conv11.bias").unwrap().tensor.data_mut().fill(0.0);
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &store);
        let mut r = rng::stream(4, "data");
        let img = Tensor::from_fn(vec![8, 8, 1], |_| r.gen::<f64>());
        let x = g.constant(img);
        let f = seg_net(&mut g, &b, &spec, x, BnMode::Train).unwrap();
        for v in g.value(f.probs).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_reaches_full_resolution_and_width() {
        let spec = SadfnSpec {
            rec: RecNetSpec { blocks: 1, width: 4 },
            seg: SegNetSpec { width: 4, classes: 4 },
        };
        let seg_store = init::init_seg::<f32>(&spec.seg, &mut rng::stream(2, "init")).unwrap();
        let rec_store = init::init_rec::<f32>(&spec.rec, &mut rng::stream(2, "init")).unwrap();
        let fus_store = init::init_sadfn_fusion(&spec, &rec_store, &mut rng::stream(2, "init")).unwrap();
        let mut g = Graph::new();
        let bs = Bound::new(&mut g, &seg_store);
        let bf = Bound::new(&mut g, &fus_store);
        let mut r = rng::stream(6, "data");
        let img = Tensor::from_fn(vec![8, 8, 1], |_| r.gen::<f32>());
        let x = g.constant(img);
        let f = seg_net(&mut g, &bs, &spec.seg, x, BnMode::Train).unwrap();
        let agg = mlfa_aggregate(&mut g, &bf, &f.taps).unwrap();
        assert_eq!(g.value(agg).shape(), [8, 8, 4]);

        // Wrong tap count is rejected.
        assert!(mlfa_aggregate(&mut g, &bf, &f.taps[..9]).is_err());
    }

    #[test]
    fn aggregation_of_zero_taps_is_relu_bias() {
        let spec = SadfnSpec {
            rec: RecNetSpec { blocks: 1, width: 4 },
            seg: SegNetSpec { width: 4, classes: 4 },
        };
        let rec_store = init::init_rec::<f64>(&spec.rec, &mut rng::stream(2, "init")).unwrap();
        let mut fus_store = init::init_sadfn_fusion(&spec, &rec_store, &mut rng::stream(2, "init")).unwrap();
        // Give the aggregation bias mixed signs so the ReLU clamp is visible.
        let biases = [0.5, -0.5, 0.25, -0.25];
        fus_store
            .get_mut("mlfa.bias")
            .unwrap()
            .tensor
            .data_mut()
            .copy_from_slice(&biases);
        let mut g = Graph::new();
        let bf = Bound::new(&mut g, &fus_store);
        let chans = spec.seg.tap_channels();
        let dims = [8usize, 8, 4, 4, 2, 2, 4, 4, 8, 8];
        let taps: Vec<NodeId> = dims
            .iter()
            .zip(chans.iter())
            .map(|(&sp, &c)| g.constant(Tensor::zeros(vec![sp, sp, c])))
            .collect();
        let agg = mlfa_aggregate(&mut g, &bf, &taps).unwrap();
        let out = g.value(agg);
        for px in 0..64 {
            for c in 0..4 {
                assert_eq!(out.data()[px * 4 + c], biases[c].max(0.0));
            }
        }
    }

    #[test]
    fn fusion_layer_rejects_width_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![4, 4, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 4, 2]));
        let w = g.constant(Tensor::zeros(vec![1, 1, 5, 3]));
        let bias = g.constant(Tensor::zeros(vec![3]));
        assert!(fusion_layer(&mut g, a, b, w, bias).is_err());
    }

    #[test]
    fn fusion_layer_output_depends_on_segmentation_features() {
        let mut g = Graph::<f64>::new();
        let mut r = rng::stream(8, "data");
        let rec = Tensor::from_fn(vec![4, 4, 3], |_| r.gen::<f64>());
        let seg_a = Tensor::from_fn(vec![4, 4, 3], |_| r.gen::<f64>());
        let mut seg_b = seg_a.clone();
        seg_b.data_mut()[5] += 1.0;
        let w = Tensor::from_fn(vec![1, 1, 6, 3], |_| r.gen::<f64>() - 0.3);
        let bias = Tensor::zeros(vec![3]);

        let rn = g.constant(rec);
        let wn = g.constant(w);
        let bn = g.constant(bias);
        let sa = g.constant(seg_a);
        let sb = g.constant(seg_b);
        let fa = fusion_layer(&mut g, rn, sa, wn, bn).unwrap();
        let fb = fusion_layer(&mut g, rn, sb, wn, bn).unwrap();
        let diff: f64 = g
            .value(fa)
            .data()
            .iter()
            .zip(g.value(fb).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "perturbing segmentation features changed nothing");
    }

    #[test]
    fn passthrough_fusion_network_equals_copied_cascade() {
        let spec = SadfnSpec {
            rec: RecNetSpec { blocks: 2, width: 4 },
            seg: SegNetSpec { width: 4, classes: 4 },
        };
        let (_, y, mask, x0) = test_setup::<f32>(8, 8, 11);
        let mut rec_store = init::init_rec::<f32>(&spec.rec, &mut rng::stream(3, "init")).unwrap();
        let mut seg_store = init::init_seg::<f32>(&spec.seg, &mut rng::stream(4, "init")).unwrap();
        let fus_store = init::init_sadfn_fusion(&spec, &rec_store, &mut rng::stream(5, "init")).unwrap();
        rec_store.freeze_all();
        seg_store.freeze_all();

        let mut g = Graph::new();
        let bind = SadfnBinding::new(&mut g, &rec_store, &seg_store, &fus_store).unwrap();
        let x0n = g.constant(x0);
        let f = sadfn_net(&mut g, &bind, &spec, x0n, &y, &mask).unwrap();

        // The frozen pre-reconstruction runs the same parameters, so with
        // pass-through fusion the pipeline output must match it.
        let out = g.value(f.output).data();
        let pre = g.value(f.pre_recon).data();
        let worst = out
            .iter()
            .zip(pre)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-6, "pass-through deviates by {worst}");
        assert_eq!(f.fused.len(), 8);
        assert_eq!(f.fused[3].0, "block0.fuse4");
    }

    #[test]
    fn sadfn_binding_rejects_trainable_frozen_stores() {
        let spec = SadfnSpec {
            rec: RecNetSpec { blocks: 1, width: 4 },
            seg: SegNetSpec { width: 4, classes: 4 },
        };
        let rec_store = init::init_rec::<f32>(&spec.rec, &mut rng::stream(3, "init")).unwrap();
        let mut seg_store = init::init_seg::<f32>(&spec.seg, &mut rng::stream(4, "init")).unwrap();
        let fus_store = init::init_sadfn_fusion(&spec, &rec_store, &mut rng::stream(5, "init")).unwrap();
        seg_store.freeze_all();
        let mut g = Graph::new();
        // Reconstruction store still trainable: rejected.
        assert!(SadfnBinding::new(&mut g, &rec_store, &seg_store, &fus_store).is_err());
    }

    #[test]
    fn sadfn_gradients_reach_only_fusion_parameters() {
        let spec = SadfnSpec {
            rec: RecNetSpec { blocks: 1, width: 2 },
            seg: SegNetSpec { width: 2, classes: 4 },
        };
        let (x, y, mask, x0) = test_setup::<f64>(8, 8, 13);
        let mut rec_store = init::init_rec::<f64>(&spec.rec, &mut rng::stream(3, "init")).unwrap();
        let mut seg_store = init::init_seg::<f64>(&spec.seg, &mut rng::stream(4, "init")).unwrap();
        let fus_store = init::init_sadfn_fusion(&spec, &rec_store, &mut rng::stream(5, "init")).unwrap();
        rec_store.freeze_all();
        seg_store.freeze_all();

        let mut g = Graph::new();
        let bind = SadfnBinding::new(&mut g, &rec_store, &seg_store, &fus_store).unwrap();
        let x0n = g.constant(x0);
        let f = sadfn_net(&mut g, &bind, &spec, x0n, &y, &mask).unwrap();
        let loss = g.sq_diff_sum(f.output, &x).unwrap();
        g.backward(loss).unwrap();

        for (name, id) in bind.rec.ids().chain(bind.seg.ids()) {
            assert!(g.grad(id).is_none(), "frozen parameter {name} received a gradient");
        }
        // Fusion parameters used by the forward receive gradients.
        let fuse_w = bind.fusion.id("block0.fuse1.weight").unwrap();
        let grads = g.grad(fuse_w).expect("fusion conv has a gradient");
        assert!(grads.iter().any(|v| v.abs() > 0.0));
        let mlfa_w = bind.fusion.id("mlfa.weight").unwrap();
        assert!(g.grad(mlfa_w).is_some(), "aggregation conv missing gradient");
    }

    #[test]
    fn override_binding_supports_network_level_gradient_checks() {
        let spec = RecNetSpec { blocks: 1, width: 2 };
        let (x, y, mask, x0) = test_setup::<f64>(8, 8, 21);
        let store = init::init_rec::<f64>(&spec, &mut rng::stream(6, "init")).unwrap();

        let target = "block0.conv2.weight";
        let mut builder = |g: &mut Graph<f64>, leaf: NodeId| {
            let b = Bound::with_override(g, &store, target, leaf)?;
            let x0n = g.constant(x0.clone());
            let out = rec_net(g, &b, &spec, x0n, &y, &mask)?;
            g.sq_diff_sum(out, &x)
        };
        let probe = store.get(target).unwrap().tensor.clone();
        let err = crate::tensor::gradcheck::grad_check(&mut builder, &probe, 1e-5).unwrap();
        assert!(err < 1e-4, "network-level gradient error {err}");

        // Shape mismatches and unknown names are rejected.
        let mut g = Graph::new();
        let bad = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(Bound::with_override(&mut g, &store, target, bad).is_err());
        assert!(Bound::with_override(&mut g, &store, "nope", bad).is_err());
    }

    #[test]
    fn zero_weight_control_cascade_is_pure_data_fidelity() {
        let (_, y, mask, x0) = test_setup::<f64>(8, 8, 17);
        let spec = WosSpec { blocks: 1, width: 4 };
        let mut store = init::init_wos::<f64>(&spec, &mut rng::stream(0, "init")).unwrap();
        for (_, p) in store.iter_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &store);
        let x0n = g.constant(x0.clone());
        let out = wos_net(&mut g, &b, &spec, x0n, &y, &mask).unwrap();
        let df = crate::mri::data_fidelity(&x0, &y, &mask).unwrap();
        for (a, b) in g.value(out).data().iter().zip(df.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wos_layer_shapes_alternate() {
        let (_, y, mask, x0) = test_setup::<f32>(8, 8, 19);
        let spec = WosSpec { blocks: 1, width: 4 };
        let store = init::init_wos::<f32>(&spec, &mut rng::stream(1, "init")).unwrap();
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &store);
        let x0n = g.constant(x0);
        let out = wos_net(&mut g, &b, &spec, x0n, &y, &mask).unwrap();
        assert_eq!(g.value(out).shape(), [8, 8]);
    }
}
