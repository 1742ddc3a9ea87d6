//! K-space sampling masks.
//!
//! A mask marks which discrete frequencies are measured. Coordinates are
//! unshifted DFT indices: `(0, 0)` is the DC component, and the frequency
//! paired with `(r, c)` under complex conjugation is `(-r mod H, -c mod W)`.
//!
//! Both generators produce **conjugate-symmetric** masks (closed under
//! that pairing). For real-valued images the spectrum is conjugate
//! symmetric, so a symmetric mask measures whole conjugate pairs; this is
//! what makes the real-part data-fidelity projection exactly idempotent
//! and exactly consistent with the measurements. Symmetry is achieved by
//! selecting frequencies in mirror pairs, using the self-paired Nyquist
//! frequencies (available when a dimension is even) to absorb parity.

use crate::{pgm, rng, Error, Result};
use rand::Rng;
use std::path::Path;

/// Mask generator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Full rows of k-space (1-D undersampling along the row axis):
    /// a centered low-frequency band plus random rows.
    Cartesian1d,
    /// Individual k-space points chosen at random, DC always included.
    Random2d,
}

impl MaskKind {
    /// Parses the textual form used by the CLI and sidecar files.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cartesian1d" => Ok(MaskKind::Cartesian1d),
            "random2d" => Ok(MaskKind::Random2d),
            _ => Err(Error::Invalid(format!(
                "unknown mask kind {s:?} (expected cartesian1d or random2d)"
            ))),
        }
    }

    /// Textual form.
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Cartesian1d => "cartesian1d",
            MaskKind::Random2d => "random2d",
        }
    }
}

/// Binary k-space sampling mask with its generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    h: usize,
    w: usize,
    keep: Vec<bool>,
    /// Generator family that produced the mask.
    pub kind: MaskKind,
    /// Requested sampling fraction.
    pub fraction: f64,
    /// Seed the mask was drawn with.
    pub seed: u64,
}

fn check_geometry(h: usize, w: usize, fraction: f64) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::Invalid(format!(
            "mask dimensions must be at least 2x2, got {h}x{w}"
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!(
            "sampling fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok(())
}

/// Selects `k` distinct elements of `pool` uniformly (partial Fisher-Yates).
fn choose_k<T: Copy>(pool: &mut Vec<T>, k: usize, rng: &mut impl Rng) -> Vec<T> {
    debug_assert!(k <= pool.len());
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let i = rng.gen_range(0..pool.len());
        out.push(pool.swap_remove(i));
    }
    out
}

impl SamplingMask {
    /// Generates a mask of the given kind.
    pub fn generate(kind: MaskKind, h: usize, w: usize, fraction: f64, seed: u64) -> Result<Self> {
        match kind {
            MaskKind::Cartesian1d => Self::cartesian1d(h, w, fraction, seed),
            MaskKind::Random2d => Self::random2d(h, w, fraction, seed),
        }
    }

    /// Row-based 1-D undersampling: `round(fraction * H)` full rows,
    /// consisting of a centered low-frequency band of about
    /// `round(0.08 * H)` rows (at least one) plus uniformly chosen
    /// mirror pairs of rows.
    ///
    /// The row count is met exactly when `H` is even; for odd `H`, where
    /// only the DC row is self-paired, an incompatible parity costs one
    /// row to preserve conjugate symmetry.
    pub fn cartesian1d(h: usize, w: usize, fraction: f64, seed: u64) -> Result<Self> {
        check_geometry(h, w, fraction)?;
        let target = ((fraction * h as f64).round() as usize).clamp(1, h);
        let band_target = ((0.08 * h as f64).round() as usize).clamp(1, target);

        let mut rows = vec![false; h];
        let mut placed = 0usize;
        rows[0] = true; // DC row anchors the centered band
        placed += 1;

        // Centered band: mirror pairs {r, h-r} outward from DC.
        let mut r = 1usize;
        while placed + 2 <= band_target && r < h - r {
            rows[r] = true;
            rows[h - r] = true;
            placed += 2;
            r += 1;
        }

        let mut remaining = target - placed;
        // Nyquist row (h even) is its own mirror; use it to absorb odd parity.
        if remaining % 2 == 1 {
            if h % 2 == 0 && !rows[h / 2] {
                rows[h / 2] = true;
                remaining -= 1;
            } else {
                remaining -= 1; // drop one row; symmetry wins over exact count
            }
        }

        let mut candidates: Vec<usize> = (r..h.div_ceil(2)).filter(|&x| !rows[x] && x != h - x).collect();
        if remaining / 2 > candidates.len() {
            return Err(Error::Invalid(format!(
                "cartesian1d: cannot place {target} symmetric rows in height {h}"
            )));
        }
        let mut rng = rng::stream(seed, "mask");
        for row in choose_k(&mut candidates, remaining / 2, &mut rng) {
            rows[row] = true;
            rows[h - row] = true;
        }

        let mut keep = vec![false; h * w];
        for (y, &on) in rows.iter().enumerate() {
            if on {
                keep[y * w..(y + 1) * w].fill(true);
            }
        }
        Ok(SamplingMask {
            h,
            w,
            keep,
            kind: MaskKind::Cartesian1d,
            fraction,
            seed,
        })
    }

    /// Point-wise 2-D undersampling: `round(fraction * H * W)` k-space
    /// points, DC always included, the rest chosen uniformly as mirror
    /// pairs `{(r, c), (-r, -c)}`.
    ///
    /// The point count is met exactly whenever a self-paired Nyquist
    /// point is available to absorb odd parity (any even dimension);
    /// for odd `H` and `W` an incompatible parity costs one point.
    pub fn random2d(h: usize, w: usize, fraction: f64, seed: u64) -> Result<Self> {
        check_geometry(h, w, fraction)?;
        let target = ((fraction * (h * w) as f64).round() as usize).clamp(1, h * w);

        let mut keep = vec![false; h * w];
        keep[0] = true; // DC
        let mut remaining = target - 1;

        // Self-paired points: both coordinates are 0 or Nyquist.
        let self_paired: Vec<usize> = {
            let mut v = Vec::new();
            if h % 2 == 0 && w % 2 == 0 {
                v.push((h / 2) * w + w / 2);
            }
            if w % 2 == 0 {
                v.push(w / 2);
            }
            if h % 2 == 0 {
                v.push((h / 2) * w);
            }
            v
        };
        let mut self_paired_free = self_paired;
        if remaining % 2 == 1 {
            if let Some(p) = self_paired_free.pop() {
                keep[p] = true;
                remaining -= 1;
            } else {
                remaining -= 1; // symmetry wins over exact count
            }
        }

        // Representatives of mirror pairs: points strictly below their
        // partner in flat order (excludes DC and self-paired points).
        let mut candidates: Vec<usize> = (0..h * w)
            .filter(|&p| {
                let (r, c) = (p / w, p % w);
                let q = ((h - r) % h) * w + (w - c) % w;
                p < q && !keep[p]
            })
            .collect();
        let mut rng = rng::stream(seed, "mask");
        let pairs = (remaining / 2).min(candidates.len());
        for p in choose_k(&mut candidates, pairs, &mut rng) {
            let (r, c) = (p / w, p % w);
            let q = ((h - r) % h) * w + (w - c) % w;
            keep[p] = true;
            keep[q] = true;
        }
        // Near-full masks can exhaust the mirror pairs; the remaining
        // self-paired Nyquist points absorb the difference one at a time.
        let mut leftover = remaining - 2 * pairs;
        while leftover > 0 {
            match self_paired_free.pop() {
                Some(p) if !keep[p] => {
                    keep[p] = true;
                    leftover -= 1;
                }
                Some(_) => {}
                None => {
                    return Err(Error::Invalid(format!(
                        "random2d: cannot place {target} symmetric points in {h}x{w}"
                    )))
                }
            }
        }

        Ok(SamplingMask {
            h,
            w,
            keep,
            kind: MaskKind::Random2d,
            fraction,
            seed,
        })
    }

    /// Grid dimensions `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Whether frequency `(r, c)` is measured.
    pub fn is_sampled(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.w + c]
    }

    /// Flat row-major view of the mask.
    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    /// Number of sampled frequencies.
    pub fn ones(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }

    /// Number of fully sampled rows (every column set).
    pub fn full_rows(&self) -> usize {
        self.keep
            .chunks_exact(self.w)
            .filter(|row| row.iter().all(|&b| b))
            .count()
    }

    /// True when the mask is closed under the conjugate pairing
    /// `(r, c) -> (-r mod H, -c mod W)`.
    pub fn is_conjugate_symmetric(&self) -> bool {
        for r in 0..self.h {
            for c in 0..self.w {
                let mirrored = self.keep[((self.h - r) % self.h) * self.w + (self.w - c) % self.w];
                if self.keep[r * self.w + c] != mirrored {
                    return false;
                }
            }
        }
        true
    }

    /// Writes the mask as PGM (255 = sampled) plus a one-line sidecar
    /// `<stem>.meta` recording `kind fraction seed`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let pixels: Vec<u8> = self.keep.iter().map(|&b| if b { 255 } else { 0 }).collect();
        pgm::write_pgm(path, self.w, self.h, &pixels)?;
        let meta = path.with_extension("meta");
        std::fs::write(&meta, format!("{} {} {}\n", self.kind.as_str(), self.fraction, self.seed))
            .map_err(|e| Error::io(&meta, e))
    }

    /// Reads a mask written by [`SamplingMask::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let (w, h, pixels) = pgm::read_pgm(path)?;
        let mut keep = Vec::with_capacity(pixels.len());
        for &p in &pixels {
            match p {
                0 => keep.push(false),
                255 => keep.push(true),
                other => {
                    return Err(Error::parse(
                        path,
                        format!("mask pixels must be 0 or 255, found {other}"),
                    ))
                }
            }
        }
        let meta_path = path.with_extension("meta");
        let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let fields: Vec<&str> = meta.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(&meta_path, "expected `kind fraction seed`"));
        }
        let kind = MaskKind::parse(fields[0])?;
        let fraction: f64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(&meta_path, format!("bad fraction {:?}", fields[1])))?;
        let seed: u64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(&meta_path, format!("bad seed {:?}", fields[2])))?;
        Ok(SamplingMask {
            h,
            w,
            keep,
            kind,
            fraction,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cartesian_example_has_expected_row_count() {
        // fraction 0.30 of 240 rows: exactly 72 rows, all full width.
        let m = SamplingMask::cartesian1d(240, 240, 0.30, 1).unwrap();
        assert_eq!(m.full_rows(), 72);
        assert_eq!(m.ones(), 72 * 240);
    }

    #[test]
    fn cartesian_band_is_present_around_dc() {
        // Band of round(0.08*240) = 19 rows: DC plus nine mirror pairs.
        let m = SamplingMask::cartesian1d(240, 240, 0.30, 5).unwrap();
        for r in 0..=9usize {
            assert!(m.is_sampled(r, 0), "band row {r} missing");
            assert!(m.is_sampled((240 - r) % 240, 0), "band row -{r} missing");
        }
    }

    #[test]
    fn random2d_example_has_expected_point_count() {
        // fraction 0.20 of 240*240 points.
        let m = SamplingMask::random2d(240, 240, 0.20, 1).unwrap();
        assert_eq!(m.ones(), 11520);
        assert!(m.is_sampled(0, 0), "DC must always be sampled");
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = SamplingMask::random2d(64, 64, 0.2, 9).unwrap();
        let b = SamplingMask::random2d(64, 64, 0.2, 9).unwrap();
        let c = SamplingMask::random2d(64, 64, 0.2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flags(), c.flags());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let m = SamplingMask::cartesian1d(64, 48, 0.3, 3).unwrap();
        m.save(&path).unwrap();
        let back = SamplingMask::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn load_rejects_gray_pixels_and_missing_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        crate::pgm::write_pgm(&path, 2, 2, &[0, 255, 128, 0]).unwrap();
        std::fs::write(path.with_extension("meta"), "random2d 0.5 1\n").unwrap();
        assert!(SamplingMask::load(&path).is_err());

        let path2 = dir.path().join("nometa.pgm");
        crate::pgm::write_pgm(&path2, 2, 2, &[0, 255, 255, 0]).unwrap();
        assert!(SamplingMask::load(&path2).is_err());
    }

    #[test]
    fn rejects_bad_fraction_and_tiny_dims() {
        assert!(SamplingMask::cartesian1d(64, 64, 0.0, 1).is_err());
        assert!(SamplingMask::cartesian1d(64, 64, 1.5, 1).is_err());
        assert!(SamplingMask::random2d(1, 64, 0.5, 1).is_err());
    }

    proptest! {
        #[test]
        fn cartesian_is_symmetric_with_exact_row_count(
            h in 8usize..80,
            fraction in 0.05f64..0.9,
            seed in 0u64..1000,
        ) {
            let h = h * 2; // even heights meet the count exactly
            let m = SamplingMask::cartesian1d(h, 32, fraction, seed).unwrap();
            prop_assert!(m.is_conjugate_symmetric());
            prop_assert_eq!(m.full_rows(), (fraction * h as f64).round() as usize);
            prop_assert_eq!(m.ones(), m.full_rows() * 32);
        }

        #[test]
        fn random2d_is_symmetric_with_exact_point_count(
            h in 4usize..24,
            w in 4usize..24,
            fraction in 0.05f64..0.9,
            seed in 0u64..1000,
        ) {
            let (h, w) = (h * 2, w * 2);
            let m = SamplingMask::random2d(h, w, fraction, seed).unwrap();
            prop_assert!(m.is_conjugate_symmetric());
            prop_assert_eq!(m.ones(), (fraction * (h * w) as f64).round().max(1.0) as usize);
            prop_assert!(m.is_sampled(0, 0));
        }

        #[test]
        fn odd_dims_stay_symmetric_within_one_of_target(
            h in 3usize..40,
            fraction in 0.1f64..0.9,
            seed in 0u64..200,
        ) {
            let h = h * 2 + 1; // odd height
            let m = SamplingMask::cartesian1d(h, 17, fraction, seed).unwrap();
            prop_assert!(m.is_conjugate_symmetric());
            let target = (fraction * h as f64).round() as usize;
            let got = m.full_rows();
            prop_assert!(got == target || got + 1 == target,
                "got {} rows for target {}", got, target);
        }
    }
}
