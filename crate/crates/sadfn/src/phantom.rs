//! Labeled synthetic brain phantoms: nested-ellipse geometry with four
//! tissue classes, per-tissue single-mode intensity distributions, a
//! smooth multiplicative bias field, dataset I/O, augmentation, and
//! intensity histograms.
//!
//! The label layout mimics an axial brain slice: background outside the
//! head, a cerebrospinal-fluid ring, a gray-matter ring, and a white-matter
//! core. Intensities are drawn per pixel from a tissue-specific normal
//! distribution, so the full-resolution histogram of each tissue is
//! single-mode — the property that undersampling artifacts destroy.

use crate::mri::{undersample, zero_filled, SamplingMask};
use crate::pgm;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Tissue classes, by label value.
pub const CLASSES: usize = 4;
/// Class names in label order: background, gray matter, white matter,
/// cerebrospinal fluid.
pub const CLASS_NAMES: [&str; CLASSES] = ["bg", "gm", "wm", "csf"];
/// Background label.
pub const LBL_BG: u8 = 0;
/// Gray-matter label.
pub const LBL_GM: u8 = 1;
/// White-matter label.
pub const LBL_WM: u8 = 2;
/// Cerebrospinal-fluid label.
pub const LBL_CSF: u8 = 3;

/// A per-pixel class map with values in `0..CLASSES`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelGrid {
    /// Wraps a row-major class map; values must be below [`CLASSES`].
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("label grid", format!("{}", h * w), format!("{}", data.len())));
        }
        if let Some(bad) = data.iter().find(|&&v| v >= CLASSES as u8) {
            return Err(Error::Invalid(format!("label value {bad} out of range 0..{CLASSES}")));
        }
        Ok(LabelGrid { h, w, data })
    }

    /// Grid dimensions `(rows, cols)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Row-major class values.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Class at a pixel.
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut counts = [0usize; CLASSES];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }

    /// Flat labels as `u32`, the layout cross-entropy losses consume.
    pub fn as_u32(&self) -> Vec<u32> {
        self.data.iter().map(|&v| u32::from(v)).collect()
    }

    /// Saves as a binary PGM whose gray values are the class indices.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        pgm::write_pgm(path, self.w, self.h, &self.data)
    }

    /// Loads a class-index PGM written by [`LabelGrid::save_pgm`].
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let (w, h, data) = pgm::read_pgm(path)?;
        LabelGrid::new(h, w, data)
    }
}

/// One labeled image: intensities in `[0, 1]` with a matching class map.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Real-valued image `[H, W]`.
    pub image: Tensor<f32>,
    /// Per-pixel tissue classes.
    pub label: LabelGrid,
}

/// Geometry and intensity model of the phantom generator.
#[derive(Debug, Clone)]
pub struct PhantomConfig {
    /// Image rows; must be divisible by 4 (segmenter pooling).
    pub h: usize,
    /// Image columns; must be divisible by 4.
    pub w: usize,
    /// Mean intensity per class, label order.
    pub means: [f64; CLASSES],
    /// Intensity standard deviation per class.
    pub sigmas: [f64; CLASSES],
    /// Relative amplitude of the smooth multiplicative bias field.
    pub bias_amplitude: f64,
}

impl PhantomConfig {
    /// Default model at a given image size: dim background, bright white
    /// matter, and well-separated single-mode tissue distributions.
    pub fn with_dims(h: usize, w: usize) -> Self {
        PhantomConfig {
            h,
            w,
            means: [0.05, 0.45, 0.70, 0.25],
            sigmas: [0.02; CLASSES],
            bias_amplitude: 0.05,
        }
    }

    /// Enforces pooling-compatible dims and pairwise mean separation of at
    /// least twice the largest standard deviation, which keeps the
    /// per-tissue distributions single-mode and disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.h % 4 != 0 || self.w % 4 != 0 {
            return Err(Error::Invalid(format!(
                "phantom dims must be positive multiples of 4, got {}x{}",
                self.h, self.w
            )));
        }
        if self.sigmas.iter().any(|&s| s <= 0.0) || self.bias_amplitude < 0.0 {
            return Err(Error::Invalid("phantom sigmas must be positive and bias amplitude non-negative".into()));
        }
        let max_sigma = self.sigmas.iter().cloned().fold(0.0, f64::max);
        for i in 0..CLASSES {
            for j in (i + 1)..CLASSES {
                let gap = (self.means[i] - self.means[j]).abs();
                if gap < 2.0 * max_sigma {
                    return Err(Error::Invalid(format!(
                        "class means {} and {} are {gap:.3} apart, need at least {:.3}",
                        CLASS_NAMES[i],
                        CLASS_NAMES[j],
                        2.0 * max_sigma
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Axis lengths and orientation of one nested-ellipse head.
struct Geometry {
    cy: f64,
    cx: f64,
    /// Outer (head) semi-axes.
    a: f64,
    b: f64,
    /// Rotation of the ellipse frame.
    cos_t: f64,
    sin_t: f64,
    /// Relative radius of the gray-matter boundary (CSF inside the head
    /// but outside this).
    gm_scale: f64,
    /// Relative radius of the white-matter core.
    wm_scale: f64,
}

impl Geometry {
    /// Squared elliptic radius of a pixel: < 1 inside the head.
    fn radius2(&self, r: usize, c: usize) -> f64 {
        let dy = r as f64 - self.cy;
        let dx = c as f64 - self.cx;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        u * u + v * v
    }

    fn label(&self, r: usize, c: usize) -> u8 {
        let q = self.radius2(r, c);
        if q > 1.0 {
            LBL_BG
        } else if q > self.gm_scale * self.gm_scale {
            LBL_CSF
        } else if q > self.wm_scale * self.wm_scale {
            LBL_GM
        } else {
            LBL_WM
        }
    }
}

/// Generates the `index`-th phantom of a dataset: randomized nested
/// ellipses labeled BG/CSF/GM/WM outside-in, intensities drawn per pixel
/// from the tissue's normal distribution, clipped to `[0, 1]`, then
/// modulated by a smooth low-order bias field. Deterministic per
/// `(seed, index)`; all randomness comes from one named stream.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut r = rng::indexed_stream(seed, "data", index);
    let (h, w) = (cfg.h as f64, cfg.w as f64);

    // Head geometry: centered ellipse with jittered axes, center, and
    // orientation; ring radii jittered around anatomical-ish proportions.
    let jitter = |r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| lo + (hi - lo) * r.gen::<f64>();
    let theta = jitter(&mut r, 0.0, std::f64::consts::PI);
    let geo = Geometry {
        cy: h * jitter(&mut r, 0.48, 0.52),
        cx: w * jitter(&mut r, 0.48, 0.52),
        a: 0.5 * h * jitter(&mut r, 0.82, 0.92),
        b: 0.5 * w * jitter(&mut r, 0.74, 0.84),
        cos_t: theta.cos(),
        sin_t: theta.sin(),
        gm_scale: jitter(&mut r, 0.77, 0.83),
        wm_scale: jitter(&mut r, 0.55, 0.61),
    };

    // Low-order bias field over normalized coordinates in [-1, 1].
    let amp = cfg.bias_amplitude;
    let (ga, gb, gc) = (
        jitter(&mut r, -1.0, 1.0),
        jitter(&mut r, -1.0, 1.0),
        jitter(&mut r, -1.0, 1.0),
    );

    let normals: Vec<Normal<f64>> = cfg
        .means
        .iter()
        .zip(cfg.sigmas.iter())
        .map(|(&m, &s)| Normal::new(m, s).expect("validated sigma"))
        .collect();

    let mut labels = Vec::with_capacity(cfg.h * cfg.w);
    let mut image = Vec::with_capacity(cfg.h * cfg.w);
    for row in 0..cfg.h {
        for col in 0..cfg.w {
            let lbl = geo.label(row, col);
            labels.push(lbl);
            let raw = normals[lbl as usize].sample(&mut r).clamp(0.0, 1.0);
            let u = 2.0 * (col as f64) / (w - 1.0) - 1.0;
            let v = 2.0 * (row as f64) / (h - 1.0) - 1.0;
            let bias = 1.0 + amp * (ga * u + gb * v + gc * u * v);
            // Final clamp keeps the [0, 1] invariant under the bias field;
            // the round-trip through f32 makes saved images bit-exact.
            image.push((raw * bias).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![cfg.h, cfg.w], image)?,
        label: LabelGrid::new(cfg.h, cfg.w, labels)?,
    })
}

/// Generates `count` phantoms for a dataset seed.
pub fn generate_dataset(cfg: &PhantomConfig, seed: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count).map(|i| generate_phantom(cfg, seed, i as u64)).collect()
}

/// A dihedral-group element: flips then quarter turns, applied identically
/// to image and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentOp {
    /// Mirror left-right.
    pub hflip: bool,
    /// Mirror top-bottom.
    pub vflip: bool,
    /// Counter-clockwise 90° turns (0..4).
    pub quarter_turns: u8,
}

impl AugmentOp {
    /// The do-nothing element.
    pub fn identity() -> Self {
        AugmentOp {
            hflip: false,
            vflip: false,
            quarter_turns: 0,
        }
    }

    /// Draws flips and turns uniformly (16 combinations, identity included).
    pub fn draw(rng: &mut impl Rng) -> Self {
        AugmentOp {
            hflip: rng.gen(),
            vflip: rng.gen(),
            quarter_turns: rng.gen_range(0..4u8),
        }
    }

    /// Source pixel (row, col) for destination (r, c) under this op, in a
    /// grid that is `h`×`w` *after* transformation.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        // Undo the quarter turns first (they were applied last).
        let (mut r, mut c, h, w) = match self.quarter_turns % 4 {
            0 => (r, c, h, w),
            // 90° CCW maps source (i, j) of an H×W grid to (W-1-j, i).
            1 => (c, w - 1 - r, w, h),
            2 => (h - 1 - r, w - 1 - c, h, w),
            3 => (h - 1 - c, r, w, h),
            _ => unreachable!(),
        };
        if self.vflip {
            r = h - 1 - r;
        }
        if self.hflip {
            c = w - 1 - c;
        }
        (r, c)
    }
}

/// Applies an augmentation to image and label together. Odd quarter turns
/// swap the grid dimensions.
pub fn apply_augment(sample: &Sample, op: AugmentOp) -> Sample {
    let (h, w) = sample.label.dims();
    let (oh, ow) = if op.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    let image = Tensor::from_fn(vec![oh, ow], |flat| {
        let (r, c) = (flat / ow, flat % ow);
        let (sr, sc) = op.source(r, c, oh, ow);
        sample.image.data()[sr * w + sc]
    });
    let mut labels = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let (sr, sc) = op.source(r, c, oh, ow);
            labels.push(sample.label.get(sr, sc));
        }
    }
    Sample {
        image,
        label: LabelGrid::new(oh, ow, labels).expect("permuted labels stay valid"),
    }
}

/// Randomly flips and rotates a sample (image and label identically).
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    apply_augment(sample, AugmentOp::draw(rng))
}

// -- histograms --------------------------------------------------------------

/// Per-class intensity histograms over a sample set: one row per bin on the
/// fixed range `[0, 1]` (out-of-range values land in the edge bins), with
/// per-class columns and a whole-image column that is their bin-wise sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramTable {
    /// Number of equal-width bins over `[0, 1]`.
    pub bins: usize,
    /// `counts[class][bin]`; class order matches [`CLASS_NAMES`], index
    /// [`CLASSES`] is the whole image.
    pub counts: Vec<Vec<u64>>,
}

impl HistogramTable {
    /// Mass fraction of class `class` inside a `2·half + 1`-bin
    /// neighborhood centered on its modal bin (clamped at the edges).
    pub fn mode_mass(&self, class: usize, half: usize) -> f64 {
        let row = &self.counts[class];
        let total: u64 = row.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let mode = row
            .iter()
            .enumerate()
            .max_by_key(|(_, &v)| v)
            .map(|(i, _)| i)
            .unwrap_or(0);
        let lo = mode.saturating_sub(half);
        let hi = (mode + half).min(self.bins - 1);
        let mass: u64 = row[lo..=hi].iter().sum();
        mass as f64 / total as f64
    }

    /// Renders a plot-ready text table: a comment header, then one line per
    /// bin with the bin range and the five class counts.
    pub fn to_table_string(&self) -> String {
        let mut out = String::from("# bin_lo bin_hi bg gm wm csf whole\n");
        let width = 1.0 / self.bins as f64;
        for b in 0..self.bins {
            out.push_str(&format!("{:.6} {:.6}", b as f64 * width, (b + 1) as f64 * width));
            for class in 0..=CLASSES {
                out.push_str(&format!(" {}", self.counts[class][b]));
            }
            out.push('\n');
        }
        out
    }

    /// Parses a table rendered by [`HistogramTable::to_table_string`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 + CLASSES + 1 {
                return Err(Error::Invalid(format!("histogram row has {} fields, expected 7", fields.len())));
            }
            let counts: Vec<u64> = fields[2..]
                .iter()
                .map(|f| f.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Invalid(format!("bad histogram count in line {line:?}")))?;
            rows.push(counts);
        }
        if rows.is_empty() {
            return Err(Error::Invalid("histogram table has no data rows".into()));
        }
        let bins = rows.len();
        let mut counts = vec![vec![0u64; bins]; CLASSES + 1];
        for (b, row) in rows.iter().enumerate() {
            for (class, column) in counts.iter_mut().enumerate() {
                column[b] = row[class];
            }
        }
        Ok(HistogramTable { bins, counts })
    }
}

/// Histograms sample intensities per tissue class. With a mask, each image
/// is first undersampled and zero-filled-reconstructed, exposing how
/// aliasing spreads the per-tissue distributions; without one, the original
/// intensities are used.
pub fn tissue_histograms(
    samples: &[Sample],
    mask: Option<&SamplingMask>,
    bins: usize,
) -> Result<HistogramTable> {
    if samples.is_empty() {
        return Err(Error::Invalid("histogram needs at least one sample".into()));
    }
    if bins < 2 {
        return Err(Error::Invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let mut counts = vec![vec![0u64; bins]; CLASSES + 1];
    for s in samples {
        let values: Tensor<f32> = match mask {
            Some(m) => zero_filled(&undersample(&s.image, m)?, m)?,
            None => s.image.clone(),
        };
        for (&v, &lbl) in values.data().iter().zip(s.label.data()) {
            let bin = ((v as f64 * bins as f64) as isize).clamp(0, bins as isize - 1) as usize;
            counts[lbl as usize][bin] += 1;
            counts[CLASSES][bin] += 1;
        }
    }
    Ok(HistogramTable { bins, counts })
}

// -- dataset I/O ---------------------------------------------------------------

/// Writes samples as `img_NNNN.tns` + `lbl_NNNN.pgm` pairs with a manifest
/// recording the count and dims.
pub fn dataset_save(samples: &[Sample], dir: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Invalid("refusing to save an empty dataset".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = samples[0].label.dims();
    for (i, s) in samples.iter().enumerate() {
        if s.label.dims() != (h, w) {
            return Err(Error::Invalid(format!("sample {i} dims differ from sample 0")));
        }
        s.image.save_tns(&dir.join(format!("img_{i:04}.tns")))?;
        s.label.save_pgm(&dir.join(format!("lbl_{i:04}.pgm")))?;
    }
    let manifest = format!("count {}\nh {}\nw {}\n", samples.len(), h, w);
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Reads a dataset directory written by [`dataset_save`].
pub fn dataset_load(dir: &Path) -> Result<Vec<Sample>> {
    let mpath = dir.join("manifest.txt");
    let manifest = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut count: Option<usize> = None;
    for line in manifest.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if let ["count", n] = fields[..] {
            count = Some(
                n.parse()
                    .map_err(|_| Error::parse(&mpath, "bad count in manifest".to_string()))?,
            );
        }
    }
    let count = count.ok_or_else(|| Error::parse(&mpath, "manifest has no count line".to_string()))?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let image = Tensor::<f32>::load_tns(&dir.join(format!("img_{i:04}.tns")))?;
        let label = LabelGrid::load_pgm(&dir.join(format!("lbl_{i:04}.pgm")))?;
        if image.shape() != [label.dims().0, label.dims().1] {
            return Err(Error::Invalid(format!("sample {i} image and label dims disagree")));
        }
        samples.push(Sample { image, label });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::MaskKind;

    fn small_cfg() -> PhantomConfig {
        PhantomConfig::with_dims(32, 32)
    }

    #[test]
    fn labels_partition_the_image_and_all_classes_appear() {
        let s = generate_phantom(&small_cfg(), 1, 0).unwrap();
        let counts = s.label.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 32 * 32);
        for (class, &n) in counts.iter().enumerate() {
            assert!(n > 0, "class {} empty", CLASS_NAMES[class]);
        }
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn generation_is_deterministic_per_seed_and_index() {
        let a = generate_phantom(&small_cfg(), 7, 3).unwrap();
        let b = generate_phantom(&small_cfg(), 7, 3).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.label, b.label);
        let c = generate_phantom(&small_cfg(), 7, 4).unwrap();
        assert_ne!(a.image.data(), c.image.data());
        let d = generate_phantom(&small_cfg(), 8, 3).unwrap();
        assert_ne!(a.image.data(), d.image.data());
    }

    #[test]
    fn per_tissue_spread_is_smaller_than_whole_image_spread() {
        let cfg = small_cfg();
        let samples = generate_dataset(&cfg, 11, 32).unwrap();
        let stats = |vals: &[f32]| {
            let n = vals.len() as f64;
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        };
        let mut whole = Vec::new();
        let mut per_class: [Vec<f32>; CLASSES] = Default::default();
        for s in &samples {
            for (&v, &l) in s.image.data().iter().zip(s.label.data()) {
                whole.push(v);
                per_class[l as usize].push(v);
            }
        }
        let whole_sd = stats(&whole);
        for (class, vals) in per_class.iter().enumerate() {
            assert!(
                stats(vals) < whole_sd,
                "class {} spread not below whole-image spread",
                CLASS_NAMES[class]
            );
        }
    }

    #[test]
    fn degenerate_configs_are_rejected()
    {
        let mut cfg = small_cfg();
        cfg.h = 30; // not divisible by 4
        assert!(cfg.validate().is_err());

        let mut cfg = small_cfg();
        cfg.means = [0.05, 0.08, 0.70, 0.25]; // bg/gm overlap
        assert!(cfg.validate().is_err());

        let mut cfg = small_cfg();
        cfg.sigmas[2] = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_augment_is_a_no_op_and_double_flip_restores() {
        let s = generate_phantom(&small_cfg(), 2, 0).unwrap();
        let id = apply_augment(&s, AugmentOp::identity());
        assert_eq!(id.image.data(), s.image.data());
        assert_eq!(id.label, s.label);

        let f = AugmentOp {
            hflip: true,
            vflip: false,
            quarter_turns: 0,
        };
        let twice = apply_augment(&apply_augment(&s, f), f);
        assert_eq!(twice.image.data(), s.image.data());
        assert_eq!(twice.label, s.label);
    }

    #[test]
    fn four_quarter_turns_restore_and_counts_are_preserved() {
        let s = generate_phantom(&small_cfg(), 3, 1).unwrap();
        let turn = AugmentOp {
            hflip: false,
            vflip: false,
            quarter_turns: 1,
        };
        let mut t = s.clone();
        for _ in 0..4 {
            t = apply_augment(&t, turn);
        }
        assert_eq!(t.image.data(), s.image.data());
        assert_eq!(t.label, s.label);

        let mut r = rng::stream(5, "batch");
        for _ in 0..10 {
            let a = augment(&s, &mut r);
            assert_eq!(a.label.class_counts(), s.label.class_counts());
        }
    }

    #[test]
    fn augment_rotation_matches_known_small_grid() {
        // 1 2    90° CCW    2 4
        // 3 4      ->       1 3
        let image = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let label = LabelGrid::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let s = Sample { image, label };
        let t = apply_augment(
            &s,
            AugmentOp {
                hflip: false,
                vflip: false,
                quarter_turns: 1,
            },
        );
        assert_eq!(t.image.data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(t.label.data(), &[1, 3, 0, 2]);
    }

    #[test]
    fn histogram_partitions_and_concentrates_constant_class() {
        let s = generate_phantom(&small_cfg(), 4, 0).unwrap();
        let table = tissue_histograms(&[s], None, 16).unwrap();
        for b in 0..16 {
            let class_sum: u64 = (0..CLASSES).map(|c| table.counts[c][b]).sum();
            assert_eq!(class_sum, table.counts[CLASSES][b], "bin {b}");
        }

        // A constant-intensity class puts all mass in one bin.
        let image = Tensor::filled(vec![4, 4], 0.5f32);
        let label = LabelGrid::new(4, 4, vec![LBL_WM; 16]).unwrap();
        let t = tissue_histograms(&[Sample { image, label }], None, 10).unwrap();
        assert_eq!(t.counts[LBL_WM as usize][5], 16);
        assert_eq!(t.mode_mass(LBL_WM as usize, 0), 1.0);
    }

    #[test]
    fn histogram_rejects_empty_inputs_and_single_bin() {
        assert!(tissue_histograms(&[], None, 16).is_err());
        let s = generate_phantom(&small_cfg(), 4, 0).unwrap();
        assert!(tissue_histograms(std::slice::from_ref(&s), None, 1).is_err());
    }

    #[test]
    fn histogram_table_parses_back() {
        let samples = generate_dataset(&small_cfg(), 6, 4).unwrap();
        let mask = SamplingMask::generate(MaskKind::Cartesian1d, 32, 32, 0.3, 1).unwrap();
        let table = tissue_histograms(&samples, Some(&mask), 20).unwrap();
        let text = table.to_table_string();
        let back = HistogramTable::parse(&text).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&small_cfg(), 9, 3).unwrap();
        dataset_save(&samples, dir.path()).unwrap();
        let back = dataset_load(dir.path()).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn dataset_load_names_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&small_cfg(), 9, 2).unwrap();
        dataset_save(&samples, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("lbl_0001.pgm")).unwrap();
        let err = dataset_load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("lbl_0001.pgm"), "{err}");
    }
}
