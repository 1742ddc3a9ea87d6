//! Reconstruction models as self-contained values: parameters plus spec,
//! with checkpoint loading and a uniform `reconstruct` entry point used by
//! evaluation and the command-line tools.

use super::forward::{rec_net, sadfn_net, wos_net, Bound, SadfnBinding};
use super::params::ParamStore;
use super::{RecNetSpec, SadfnSpec, SegNetSpec, WosSpec};
use crate::mri::{zero_filled, ComplexGrid, SamplingMask};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};
use std::path::Path;
use std::sync::Arc;

/// A reconstruction method ready to run on measurements.
///
/// Training works in single precision, so models are fixed to `f32`.
pub enum ReconModel {
    /// Adjoint reconstruction, no parameters.
    ZeroFilled,
    /// Reconstruction cascade.
    Rec { spec: RecNetSpec, store: ParamStore<f32> },
    /// Segmentation-aware fusion pipeline (frozen cascade, frozen
    /// segmenter, trainable-store geometry).
    Sadfn {
        spec: SadfnSpec,
        rec: ParamStore<f32>,
        seg: ParamStore<f32>,
        fusion: ParamStore<f32>,
    },
    /// Width-matched control cascade.
    Wos { spec: WosSpec, store: ParamStore<f32> },
}

impl ReconModel {
    /// Short stable name used in reports and file names.
    pub fn name(&self) -> &'static str {
        match self {
            ReconModel::ZeroFilled => "zero_filled",
            ReconModel::Rec { .. } => "rec",
            ReconModel::Sadfn { .. } => "sadfn",
            ReconModel::Wos { .. } => "wos",
        }
    }

    /// Loads a cascade checkpoint directory (`kind=rec`).
    pub fn load_rec(dir: &Path) -> Result<ReconModel> {
        let (store, meta) = ParamStore::load(dir)?;
        Ok(ReconModel::Rec {
            spec: RecNetSpec::from_meta(&meta)?,
            store,
        })
    }

    /// Loads a control-cascade checkpoint directory (`kind=wos`).
    pub fn load_wos(dir: &Path) -> Result<ReconModel> {
        let (store, meta) = ParamStore::load(dir)?;
        Ok(ReconModel::Wos {
            spec: WosSpec::from_meta(&meta)?,
            store,
        })
    }

    /// Loads a fusion checkpoint: a directory with `rec/`, `seg/`, and
    /// `fusion/` sub-checkpoints. The pre-trained stores are frozen on
    /// load; the fusion store's metadata carries the pipeline spec.
    pub fn load_sadfn(dir: &Path) -> Result<ReconModel> {
        let (mut rec, rec_meta) = ParamStore::load(&dir.join("rec"))?;
        let (mut seg, seg_meta) = ParamStore::load(&dir.join("seg"))?;
        let (fusion, fus_meta) = ParamStore::load(&dir.join("fusion"))?;
        let spec = SadfnSpec::from_meta(&fus_meta)?;
        // Cross-check the sub-checkpoints agree with the pipeline spec.
        if RecNetSpec::from_meta(&rec_meta)? != spec.rec {
            return Err(Error::Invalid("fusion checkpoint's cascade spec disagrees with rec/".into()));
        }
        if SegNetSpec::from_meta(&seg_meta)? != spec.seg {
            return Err(Error::Invalid("fusion checkpoint's segmenter spec disagrees with seg/".into()));
        }
        rec.freeze_all();
        seg.freeze_all();
        Ok(ReconModel::Sadfn { spec, rec, seg, fusion })
    }

    /// Reconstructs one image from measurements. The zero-filled adjoint
    /// seeds every method; network models refine it.
    pub fn reconstruct(&self, y: &ComplexGrid<f32>, mask: &SamplingMask) -> Result<Tensor<f32>> {
        let x0 = zero_filled(y, mask)?;
        let y = Arc::new(y.clone());
        let mask = Arc::new(mask.clone());
        match self {
            ReconModel::ZeroFilled => Ok(x0),
            ReconModel::Rec { spec, store } => {
                let mut g = Graph::new();
                let b = Bound::new(&mut g, store);
                let x0n = g.constant(x0);
                let out = rec_net(&mut g, &b, spec, x0n, &y, &mask)?;
                Ok(g.value(out).clone())
            }
            ReconModel::Sadfn { spec, rec, seg, fusion } => {
                let mut g = Graph::new();
                let bind = SadfnBinding::new(&mut g, rec, seg, fusion)?;
                let x0n = g.constant(x0);
                let f = sadfn_net(&mut g, &bind, spec, x0n, &y, &mask)?;
                Ok(g.value(f.output).clone())
            }
            ReconModel::Wos { spec, store } => {
                let mut g = Graph::new();
                let b = Bound::new(&mut g, store);
                let x0n = g.constant(x0);
                let out = wos_net(&mut g, &b, spec, x0n, &y, &mask)?;
                Ok(g.value(out).clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::{undersample, MaskKind};
    use crate::net::init;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn rec_checkpoint_roundtrip_reconstructs_identically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = RecNetSpec { blocks: 1, width: 4 };
        let store = init::init_rec::<f32>(&spec, &mut rng::stream(1, "init")).unwrap();
        store.save(dir.path(), &spec.meta()).unwrap();

        let model = ReconModel::load_rec(dir.path()).unwrap();
        let mask = SamplingMask::generate(MaskKind::Cartesian1d, 8, 8, 0.5, 3).unwrap();
        let mut r = rng::stream(2, "data");
        let x = Tensor::from_fn(vec![8, 8], |_| r.gen::<f32>());
        let y = undersample(&x, &mask).unwrap();

        let direct = ReconModel::Rec { spec, store };
        let a = direct.reconstruct(&y, &mask).unwrap();
        let b = model.reconstruct(&y, &mask).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn sadfn_checkpoint_layout_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SadfnSpec {
            rec: RecNetSpec { blocks: 1, width: 4 },
            seg: SegNetSpec { width: 4, classes: 4 },
        };
        let mut rec = init::init_rec::<f32>(&spec.rec, &mut rng::stream(1, "init")).unwrap();
        let mut seg = init::init_seg::<f32>(&spec.seg, &mut rng::stream(2, "init")).unwrap();
        let fusion = init::init_sadfn_fusion(&spec, &rec, &mut rng::stream(3, "init")).unwrap();
        rec.freeze_all();
        seg.freeze_all();
        rec.save(&dir.path().join("rec"), &spec.rec.meta()).unwrap();
        seg.save(&dir.path().join("seg"), &spec.seg.meta()).unwrap();
        fusion.save(&dir.path().join("fusion"), &spec.meta()).unwrap();

        let model = ReconModel::load_sadfn(dir.path()).unwrap();
        let mask = SamplingMask::generate(MaskKind::Random2d, 8, 8, 0.4, 5).unwrap();
        let mut r = rng::stream(4, "data");
        let x = Tensor::from_fn(vec![8, 8], |_| r.gen::<f32>());
        let y = undersample(&x, &mask).unwrap();
        let out = model.reconstruct(&y, &mask).unwrap();
        assert_eq!(out.shape(), [8, 8]);
        assert!(out.all_finite());
    }

    #[test]
    fn wrong_checkpoint_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = RecNetSpec { blocks: 1, width: 4 };
        let store = init::init_rec::<f32>(&spec, &mut rng::stream(1, "init")).unwrap();
        store.save(dir.path(), &spec.meta()).unwrap();
        assert!(ReconModel::load_wos(dir.path()).is_err());
    }
}
