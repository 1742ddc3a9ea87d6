//! Network architectures: reconstruction cascade, U-Net segmenter,
//! segmentation-aware deep fusion network, and its width-matched control.
//!
//! Everything is parameterized by channel width so the same code runs at
//! publication scale (240×240, width 32) for shape conformance checks and at
//! desk scale (64×64, width 8) for end-to-end training. Submodules:
//!
//! - [`params`]: named parameter stores and checkpoint I/O,
//! - [`init`]: parameter initialization for each architecture,
//! - [`forward`]: tape builders that assemble forward passes on a [`crate::tensor::Graph`],
//! - [`model`]: a reconstruction-model enum bundling parameters with their spec.
//!
//! This module itself holds the architecture *specs* and programmatic shape
//! traces that mirror the layer tables the architectures are defined by.

pub mod forward;
pub mod init;
pub mod model;
pub mod params;

pub use forward::{fusion_layer, mlfa_aggregate, rec_net, seg_net, wos_net, Bound, SadfnBinding, SadfnForward, SegForward};
pub use model::ReconModel;
pub use params::{Param, ParamStore};

use crate::{Error, Result};
use indexmap::IndexMap;

/// Spec of a reconstruction cascade: `blocks` residual conv blocks, each
/// five 3×3 convolutions wide `width`, closed by a data-fidelity layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecNetSpec {
    /// Number of cascaded blocks.
    pub blocks: usize,
    /// Channels of the four hidden convolutions per block.
    pub width: usize,
}

impl RecNetSpec {
    /// Publication-scale configuration: 5 blocks, 32 channels.
    pub fn full_scale() -> Self {
        RecNetSpec { blocks: 5, width: 32 }
    }

    /// Rejects degenerate configurations.
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 {
            return Err(Error::Invalid(format!(
                "reconstruction spec needs blocks >= 1 and width >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Checkpoint metadata for this spec.
    pub fn meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", "rec".into()),
            ("blocks", self.blocks.to_string()),
            ("width", self.width.to_string()),
        ]
    }

    /// Parses checkpoint metadata written by [`RecNetSpec::meta`].
    pub fn from_meta(meta: &IndexMap<String, String>) -> Result<Self> {
        expect_kind(meta, "rec")?;
        let spec = RecNetSpec {
            blocks: meta_usize(meta, "blocks")?,
            width: meta_usize(meta, "width")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Spec of the U-Net segmenter: channel ladder `width, 2·width, 4·width`,
/// `classes` output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegNetSpec {
    /// Channels at full resolution; halved resolutions double this.
    pub width: usize,
    /// Number of output classes (tissue types plus background).
    pub classes: usize,
}

impl SegNetSpec {
    /// Publication-scale configuration: ladder 32/64/128, 4 classes.
    pub fn full_scale() -> Self {
        SegNetSpec { width: 32, classes: 4 }
    }

    /// Rejects degenerate configurations.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.classes < 2 {
            return Err(Error::Invalid(format!(
                "segmentation spec needs width >= 1 and classes >= 2, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Channel counts of the ten feature taps (post-activation outputs of
    /// the ten hidden convolutions, encoder to decoder).
    pub fn tap_channels(&self) -> [usize; 10] {
        let (w1, w2, w3) = (self.width, 2 * self.width, 4 * self.width);
        [w1, w1, w2, w2, w3, w3, w2, w2, w1, w1]
    }

    /// Total channels after concatenating all upsampled taps
    /// (640 at publication scale).
    pub fn tap_total(&self) -> usize {
        self.tap_channels().iter().sum()
    }

    /// Checkpoint metadata for this spec.
    pub fn meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", "seg".into()),
            ("width", self.width.to_string()),
            ("classes", self.classes.to_string()),
        ]
    }

    /// Parses checkpoint metadata written by [`SegNetSpec::meta`].
    pub fn from_meta(meta: &IndexMap<String, String>) -> Result<Self> {
        expect_kind(meta, "seg")?;
        let spec = SegNetSpec {
            width: meta_usize(meta, "width")?,
            classes: meta_usize(meta, "classes")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Spec of the fusion network: a reconstruction cascade whose first four
/// conv outputs per block are fused with a shared segmentation feature
/// tensor aggregated from a frozen segmenter's taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SadfnSpec {
    /// Geometry of the fusion cascade (and of the frozen pre-reconstructor).
    pub rec: RecNetSpec,
    /// Geometry of the frozen segmenter feeding the feature aggregation.
    pub seg: SegNetSpec,
}

impl SadfnSpec {
    /// Publication-scale configuration.
    pub fn full_scale() -> Self {
        SadfnSpec {
            rec: RecNetSpec::full_scale(),
            seg: SegNetSpec::full_scale(),
        }
    }

    /// Rejects degenerate configurations.
    pub fn validate(&self) -> Result<()> {
        self.rec.validate()?;
        self.seg.validate()
    }

    /// Checkpoint metadata for the fusion parameter store.
    pub fn meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", "fusion".into()),
            ("blocks", self.rec.blocks.to_string()),
            ("width", self.rec.width.to_string()),
            ("seg_width", self.seg.width.to_string()),
            ("classes", self.seg.classes.to_string()),
        ]
    }

    /// Parses checkpoint metadata written by [`SadfnSpec::meta`].
    pub fn from_meta(meta: &IndexMap<String, String>) -> Result<Self> {
        expect_kind(meta, "fusion")?;
        let spec = SadfnSpec {
            rec: RecNetSpec {
                blocks: meta_usize(meta, "blocks")?,
                width: meta_usize(meta, "width")?,
            },
            seg: SegNetSpec {
                width: meta_usize(meta, "seg_width")?,
                classes: meta_usize(meta, "classes")?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Spec of the width-matched control: same block count as the fusion
/// network, alternating wide 3×3 (`2·width`) and narrow 1×1 (`width`)
/// convolutions so its capacity matches a fused block without any
/// segmentation input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WosSpec {
    /// Number of cascaded blocks.
    pub blocks: usize,
    /// Narrow channel count; wide layers use twice this.
    pub width: usize,
}

impl WosSpec {
    /// Publication-scale configuration: 5 blocks, 64/32 channels.
    pub fn full_scale() -> Self {
        WosSpec { blocks: 5, width: 32 }
    }

    /// Rejects degenerate configurations.
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 {
            return Err(Error::Invalid(format!(
                "control-network spec needs blocks >= 1 and width >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Checkpoint metadata for this spec.
    pub fn meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", "wos".into()),
            ("blocks", self.blocks.to_string()),
            ("width", self.width.to_string()),
        ]
    }

    /// Parses checkpoint metadata written by [`WosSpec::meta`].
    pub fn from_meta(meta: &IndexMap<String, String>) -> Result<Self> {
        expect_kind(meta, "wos")?;
        let spec = WosSpec {
            blocks: meta_usize(meta, "blocks")?,
            width: meta_usize(meta, "width")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn expect_kind(meta: &IndexMap<String, String>, want: &str) -> Result<()> {
    match meta.get("kind") {
        Some(k) if k == want => Ok(()),
        Some(k) => Err(Error::Invalid(format!("checkpoint kind is {k:?}, expected {want:?}"))),
        None => Err(Error::Invalid("checkpoint metadata has no kind entry".into())),
    }
}

fn meta_usize(meta: &IndexMap<String, String>, key: &str) -> Result<usize> {
    meta.get(key)
        .ok_or_else(|| Error::Invalid(format!("checkpoint metadata missing {key}")))?
        .parse()
        .map_err(|_| Error::Invalid(format!("checkpoint metadata {key} is not a number")))
}

// -- shape traces ----------------------------------------------------------

/// One row of a layer table: what a layer consumes and produces.
///
/// Shapes follow the table convention that single-channel spatial tensors
/// are written `[H, W]` rather than `[H, W, 1]`. Fields without a meaning
/// for a layer (pooling has no filter count, data fidelity no stride) are
/// `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    /// Layer name, e.g. `conv3` or `maxpool1`.
    pub layer: String,
    /// Input shape.
    pub input: Vec<usize>,
    /// Square filter size, if the layer convolves.
    pub filter: Option<usize>,
    /// Stride, if the layer has one.
    pub stride: Option<usize>,
    /// Number of filters (output channels), if the layer convolves.
    pub filters: Option<usize>,
    /// Activation applied by the layer.
    pub activation: &'static str,
    /// Output shape.
    pub output: Vec<usize>,
}

impl TraceRow {
    fn conv(layer: &str, input: Vec<usize>, k: usize, filters: usize, act: &'static str, output: Vec<usize>) -> Self {
        TraceRow {
            layer: layer.into(),
            input,
            filter: Some(k),
            stride: Some(1),
            filters: Some(filters),
            activation: act,
            output,
        }
    }
}

/// Layer rows of one reconstruction block at the given image size —
/// four hidden convs, a single-channel linear conv, and data fidelity.
pub fn rec_block_trace(spec: &RecNetSpec, h: usize, w: usize) -> Vec<TraceRow> {
    let f = spec.width;
    let mut rows = vec![TraceRow::conv("conv1", vec![h, w], 3, f, "ReLU", vec![h, w, f])];
    for i in 2..=4 {
        rows.push(TraceRow::conv(&format!("conv{i}"), vec![h, w, f], 3, f, "ReLU", vec![h, w, f]));
    }
    rows.push(TraceRow::conv("conv5", vec![h, w, f], 3, 1, "Linear", vec![h, w]));
    rows.push(TraceRow {
        layer: "data_fidelity".into(),
        input: vec![h, w],
        filter: None,
        stride: None,
        filters: None,
        activation: "N/A",
        output: vec![h, w],
    });
    rows
}

/// Layer rows of the segmenter at the given image size: encoder with two
/// pools, decoder with two stride-2 transposed convs and skip
/// concatenations, class conv, and channel softmax. The softmax row's
/// output is the `[H, W]` label map obtained by per-pixel argmax.
pub fn seg_net_trace(spec: &SegNetSpec, h: usize, w: usize) -> Vec<TraceRow> {
    let (w1, w2, w3) = (spec.width, 2 * spec.width, 4 * spec.width);
    let (h2, v2) = (h / 2, w / 2);
    let (h4, v4) = (h / 4, w / 4);
    let pool = |name: &str, input: Vec<usize>, output: Vec<usize>| TraceRow {
        layer: name.into(),
        input,
        filter: None,
        stride: Some(2),
        filters: None,
        activation: "N/A",
        output,
    };
    // The transposed convs double the spatial dims, i.e. operate at stride 2
    // in output space.
    let deconv = |name: &str, input: Vec<usize>, filters: usize, output: Vec<usize>| TraceRow {
        layer: name.into(),
        input,
        filter: Some(3),
        stride: Some(2),
        filters: Some(filters),
        activation: "ReLU",
        output,
    };
    vec![
        TraceRow::conv("conv1", vec![h, w], 3, w1, "ReLU", vec![h, w, w1]),
        TraceRow::conv("conv2", vec![h, w, w1], 3, w1, "ReLU", vec![h, w, w1]),
        pool("maxpool1", vec![h, w, w1], vec![h2, v2, w1]),
        TraceRow::conv("conv3", vec![h2, v2, w1], 3, w2, "ReLU", vec![h2, v2, w2]),
        TraceRow::conv("conv4", vec![h2, v2, w2], 3, w2, "ReLU", vec![h2, v2, w2]),
        pool("maxpool2", vec![h2, v2, w2], vec![h4, v4, w2]),
        TraceRow::conv("conv5", vec![h4, v4, w2], 3, w3, "ReLU", vec![h4, v4, w3]),
        TraceRow::conv("conv6", vec![h4, v4, w3], 3, w3, "ReLU", vec![h4, v4, w3]),
        deconv("deconv1", vec![h4, v4, w3], w2, vec![h2, v2, w2]),
        // conv7 consumes the concatenation of deconv1 with the conv4 skip.
        TraceRow::conv("conv7", vec![h2, v2, w2 + w2], 3, w2, "ReLU", vec![h2, v2, w2]),
        TraceRow::conv("conv8", vec![h2, v2, w2], 3, w2, "ReLU", vec![h2, v2, w2]),
        deconv("deconv2", vec![h2, v2, w2], w1, vec![h, w, w1]),
        TraceRow::conv("conv9", vec![h, w, w1 + w1], 3, w1, "ReLU", vec![h, w, w1]),
        TraceRow::conv("conv10", vec![h, w, w1], 3, w1, "ReLU", vec![h, w, w1]),
        TraceRow::conv("conv11", vec![h, w, w1], 3, spec.classes, "Linear", vec![h, w, spec.classes]),
        TraceRow {
            layer: "softmax".into(),
            input: vec![h, w, spec.classes],
            filter: None,
            stride: None,
            filters: None,
            activation: "N/A",
            output: vec![h, w],
        },
    ]
}

/// Layer rows of one control-network block: four wide-3×3 / narrow-1×1
/// pairs, a single-channel linear conv, and data fidelity.
pub fn wos_block_trace(spec: &WosSpec, h: usize, w: usize) -> Vec<TraceRow> {
    let (narrow, wide) = (spec.width, 2 * spec.width);
    let mut rows = vec![TraceRow::conv("conv1", vec![h, w], 3, wide, "ReLU", vec![h, w, wide])];
    for pair in 1..4 {
        let a = 2 * pair;
        rows.push(TraceRow::conv(
            &format!("conv{a}"),
            vec![h, w, wide],
            1,
            narrow,
            "ReLU",
            vec![h, w, narrow],
        ));
        rows.push(TraceRow::conv(
            &format!("conv{}", a + 1),
            vec![h, w, narrow],
            3,
            wide,
            "ReLU",
            vec![h, w, wide],
        ));
    }
    rows.push(TraceRow::conv("conv8", vec![h, w, wide], 1, narrow, "ReLU", vec![h, w, narrow]));
    rows.push(TraceRow::conv("conv9", vec![h, w, narrow], 3, 1, "Linear", vec![h, w]));
    rows.push(TraceRow {
        layer: "data_fidelity".into(),
        input: vec![h, w],
        filter: None,
        stride: None,
        filters: None,
        activation: "N/A",
        output: vec![h, w],
    });
    rows
}

/// Rows of the feature-aggregation stage: all segmenter taps upsampled to
/// full resolution and concatenated, then compressed by a 1×1 convolution
/// to the fusion width (640 → 32 at publication scale).
pub fn mlfa_trace(spec: &SadfnSpec, h: usize, w: usize) -> Vec<TraceRow> {
    let total = spec.seg.tap_total();
    vec![
        TraceRow {
            layer: "concat_taps".into(),
            input: vec![h, w],
            filter: None,
            stride: None,
            filters: None,
            activation: "N/A",
            output: vec![h, w, total],
        },
        TraceRow::conv("aggregate", vec![h, w, total], 1, spec.rec.width, "ReLU", vec![h, w, spec.rec.width]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_rec_trace_shapes() {
        let rows = rec_block_trace(&RecNetSpec::full_scale(), 240, 240);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].input, vec![240, 240]);
        assert_eq!(rows[0].output, vec![240, 240, 32]);
        assert_eq!(rows[4].output, vec![240, 240]);
        assert_eq!(rows[4].activation, "Linear");
        assert_eq!(rows[5].layer, "data_fidelity");
    }

    #[test]
    fn full_scale_seg_trace_tap_total_is_640() {
        let spec = SegNetSpec::full_scale();
        assert_eq!(spec.tap_total(), 640);
        let rows = seg_net_trace(&spec, 240, 240);
        assert_eq!(rows.len(), 16);
        // Skip concatenations widen the decoder conv inputs.
        assert_eq!(rows[9].layer, "conv7");
        assert_eq!(rows[9].input, vec![120, 120, 128]);
        assert_eq!(rows[12].layer, "conv9");
        assert_eq!(rows[12].input, vec![240, 240, 64]);
        assert_eq!(rows[14].output, vec![240, 240, 4]);
        assert_eq!(rows[15].output, vec![240, 240]);
    }

    #[test]
    fn half_scale_ladder_halves_aggregation_widths() {
        // Channel ladder 16/32/64 concatenates to 320 and compresses to 16.
        let spec = SadfnSpec {
            rec: RecNetSpec { blocks: 5, width: 16 },
            seg: SegNetSpec { width: 16, classes: 4 },
        };
        let rows = mlfa_trace(&spec, 120, 120);
        assert_eq!(rows[0].output, vec![120, 120, 320]);
        assert_eq!(rows[1].output, vec![120, 120, 16]);
    }

    #[test]
    fn wos_trace_alternates_wide_and_narrow() {
        let rows = wos_block_trace(&WosSpec::full_scale(), 240, 240);
        assert_eq!(rows.len(), 10);
        for (i, row) in rows.iter().take(8).enumerate() {
            let want = if i % 2 == 0 { 64 } else { 32 };
            assert_eq!(row.output[2], want, "row {i}");
            assert_eq!(row.filter, Some(if i % 2 == 0 { 3 } else { 1 }), "row {i}");
        }
        assert_eq!(rows[8].output, vec![240, 240]);
    }

    #[test]
    fn spec_meta_roundtrips() {
        let rec = RecNetSpec { blocks: 2, width: 8 };
        let m: IndexMap<String, String> = rec.meta().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        assert_eq!(RecNetSpec::from_meta(&m).unwrap(), rec);

        let sadfn = SadfnSpec {
            rec,
            seg: SegNetSpec { width: 8, classes: 4 },
        };
        let m: IndexMap<String, String> = sadfn.meta().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        assert_eq!(SadfnSpec::from_meta(&m).unwrap(), sadfn);

        // Kind mismatch is rejected.
        assert!(SegNetSpec::from_meta(&m).is_err());
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(RecNetSpec { blocks: 0, width: 8 }.validate().is_err());
        assert!(SegNetSpec { width: 8, classes: 1 }.validate().is_err());
        assert!(WosSpec { blocks: 1, width: 0 }.validate().is_err());
    }
}
