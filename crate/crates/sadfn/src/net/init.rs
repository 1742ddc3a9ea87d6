//! Fresh parameter stores for each architecture.
//!
//! Weights are He-initialized (fan-in) and biases zero; batch-norm starts
//! at identity with zeroed running means and unit running variances.
//! Parameters are created in a fixed layer order and draws are consumed
//! sequentially, so a given generator state always produces the same store.

use super::params::{he_conv_weight, insert_batchnorm, insert_conv, ParamStore};
use super::{RecNetSpec, SadfnSpec, SegNetSpec, WosSpec};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};
use rand::Rng;

/// Initializes a reconstruction cascade. Per block `b`:
/// `block{b}.conv1..4` (3×3, width channels) and `block{b}.conv5`
/// (3×3, 1 channel).
pub fn init_rec<T: Real>(spec: &RecNetSpec, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    spec.validate()?;
    let f = spec.width;
    let mut store = ParamStore::new();
    for b in 0..spec.blocks {
        insert_conv(&mut store, &format!("block{b}.conv1"), 3, 1, f, rng)?;
        for i in 2..=4 {
            insert_conv(&mut store, &format!("block{b}.conv{i}"), 3, f, f, rng)?;
        }
        insert_conv(&mut store, &format!("block{b}.conv5"), 3, f, 1, rng)?;
    }
    Ok(store)
}

fn conv_bn<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    insert_conv(store, name, 3, cin, cout, rng)?;
    insert_batchnorm(store, &format!("{name}.bn"), cout)
}

/// Initializes the segmenter: `conv1..conv11`, `deconv1..deconv2`, with
/// batch-norm parameters under `<layer>.bn.*` for every layer except the
/// class conv `conv11`.
pub fn init_seg<T: Real>(spec: &SegNetSpec, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    spec.validate()?;
    let (w1, w2, w3) = (spec.width, 2 * spec.width, 4 * spec.width);
    let mut store = ParamStore::new();
    conv_bn(&mut store, "conv1", 1, w1, rng)?;
    conv_bn(&mut store, "conv2", w1, w1, rng)?;
    conv_bn(&mut store, "conv3", w1, w2, rng)?;
    conv_bn(&mut store, "conv4", w2, w2, rng)?;
    conv_bn(&mut store, "conv5", w2, w3, rng)?;
    conv_bn(&mut store, "conv6", w3, w3, rng)?;
    conv_bn(&mut store, "deconv1", w3, w2, rng)?;
    conv_bn(&mut store, "conv7", w2 + w2, w2, rng)?;
    conv_bn(&mut store, "conv8", w2, w2, rng)?;
    conv_bn(&mut store, "deconv2", w2, w1, rng)?;
    conv_bn(&mut store, "conv9", w1 + w1, w1, rng)?;
    conv_bn(&mut store, "conv10", w1, w1, rng)?;
    insert_conv(&mut store, "conv11", 3, w1, spec.classes, rng)?;
    Ok(store)
}

/// Initializes the width-matched control cascade. Per block `b`:
/// `block{b}.conv1..8` alternating wide 3×3 / narrow 1×1, and
/// `block{b}.conv9` (3×3, 1 channel).
pub fn init_wos<T: Real>(spec: &WosSpec, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    spec.validate()?;
    let (narrow, wide) = (spec.width, 2 * spec.width);
    let mut store = ParamStore::new();
    for b in 0..spec.blocks {
        insert_conv(&mut store, &format!("block{b}.conv1"), 3, 1, wide, rng)?;
        for pair in 1..=4 {
            insert_conv(&mut store, &format!("block{b}.conv{}", 2 * pair), 1, wide, narrow, rng)?;
            if pair < 4 {
                insert_conv(&mut store, &format!("block{b}.conv{}", 2 * pair + 1), 3, narrow, wide, rng)?;
            }
        }
        insert_conv(&mut store, &format!("block{b}.conv9"), 3, narrow, 1, rng)?;
    }
    Ok(store)
}

/// A 1×1 fusion kernel `[1, 1, 2F, F]` that passes the first `F` input
/// channels through unchanged and ignores the rest. With zero bias the
/// fused output of non-negative features equals the features themselves,
/// so a fresh fusion network reproduces the cascade it was copied from.
pub fn passthrough_fusion_weight<T: Real>(f: usize) -> Tensor<T> {
    // Layout [1, 1, 2F, F]: flat index = ci * F + co.
    Tensor::from_fn(vec![1, 1, 2 * f, f], |flat| {
        let (ci, co) = (flat / f, flat % f);
        if ci == co {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Initializes the trainable store of the fusion network from a pre-trained
/// reconstruction store: conv weights copied (`block{b}.conv1..5`), fusion
/// convs at pass-through (`block{b}.fuse1..4`), and a He-initialized
/// aggregation conv (`mlfa`) mapping the concatenated taps to the fusion
/// width.
pub fn init_sadfn_fusion<T: Real>(
    spec: &SadfnSpec,
    pretrained: &ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<ParamStore<T>> {
    spec.validate()?;
    let f = spec.rec.width;
    // The copied cascade must have the spec's geometry.
    let w1 = pretrained.get("block0.conv1.weight")?;
    if w1.tensor.shape() != [3, 3, 1, f] {
        return Err(Error::shape(
            "fusion init from pre-trained cascade",
            format!("[3, 3, 1, {f}]"),
            format!("{:?}", w1.tensor.shape()),
        ));
    }
    let mut store = ParamStore::new();
    store.insert("mlfa.weight", he_conv_weight(1, spec.seg.tap_total(), f, rng), true)?;
    store.insert("mlfa.bias", Tensor::zeros(vec![f]), true)?;
    for b in 0..spec.rec.blocks {
        for i in 1..=5 {
            for part in ["weight", "bias"] {
                let name = format!("block{b}.conv{i}.{part}");
                let src = pretrained.get(&name)?;
                store.insert(name, src.tensor.clone(), true)?;
            }
        }
        for i in 1..=4 {
            store.insert(format!("block{b}.fuse{i}.weight"), passthrough_fusion_weight(f), true)?;
            store.insert(format!("block{b}.fuse{i}.bias"), Tensor::zeros(vec![f]), true)?;
        }
    }
    Ok(store)
}
