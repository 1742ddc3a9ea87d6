//! Named parameter stores, initialization, and checkpoint I/O.
//!
//! A [`ParamStore`] is an ordered map from parameter names (dotted paths
//! like `block0.conv1.weight`) to tensors with a trainable flag. Insertion
//! order is deterministic and preserved by checkpoints, so optimizer
//! iteration, initialization draws, and saved files are reproducible.

use crate::tensor::Tensor;
use crate::{Error, Real, Result};
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

/// A named parameter: tensor plus trainability.
#[derive(Debug, Clone)]
pub struct Param<T> {
    /// Current values.
    pub tensor: Tensor<T>,
    /// Whether optimizers may update this parameter. Running batch-norm
    /// statistics live in stores with this flag off.
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    /// Empty store.
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    /// Adds a parameter; duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param { tensor, trainable });
        Ok(())
    }

    /// Looks up a parameter by name.
    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unbound parameter name {name}")))
    }

    /// Mutable lookup.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unbound parameter name {name}")))
    }

    /// True when the store holds the name.
    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Number of parameters (tensors, not scalars).
    pub fn len(&self) -> usize {
        self.params.len()
    }

    /// True when the store is empty.
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Iterates in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Mutable iteration in insertion order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Marks every parameter non-trainable.
    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    /// True when no parameter is trainable.
    pub fn all_frozen(&self) -> bool {
        self.params.values().all(|p| !p.trainable)
    }

    /// Total number of scalar values across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Digest over names, shapes, flags, and exact `f32` value bytes, in
    /// order. Two stores with equal digests serialize identically; used to
    /// verify that frozen sub-networks survive fine-tuning untouched.
    pub fn byte_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, p) in &self.params {
            eat(name.as_bytes());
            eat(&[u8::from(p.trainable)]);
            for &d in p.tensor.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                eat(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        h
    }

    /// Writes the store as a checkpoint directory: one `.tns` file per
    /// parameter plus `manifest.txt` listing names, shapes, trainability,
    /// file names, and the given metadata keys.
    pub fn save(&self, dir: &Path, meta: &[(&str, String)]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (key, value) in meta {
            manifest.push_str(&format!("meta {key} {value}\n"));
        }
        for (name, p) in &self.params {
            let file = format!("{name}.tns");
            p.tensor.save_tns(&dir.join(&file))?;
            let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "param {name} {} {} {} {file}\n",
                p.tensor.rank(),
                if dims.is_empty() { "-".to_string() } else { dims.join(",") },
                u8::from(p.trainable),
            ));
        }
        let mpath = dir.join("manifest.txt");
        std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
    }

    /// Reads a checkpoint directory written by [`ParamStore::save`];
    /// returns the store and its metadata map.
    pub fn load(dir: &Path) -> Result<(Self, IndexMap<String, String>)> {
        let mpath = dir.join("manifest.txt");
        let manifest = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut store = ParamStore::new();
        let mut meta = IndexMap::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "meta" if fields.len() == 3 => {
                    meta.insert(fields[1].to_string(), fields[2].to_string());
                }
                "param" if fields.len() == 6 => {
                    let name = fields[1];
                    let rank: usize = fields[2]
                        .parse()
                        .map_err(|_| Error::parse(&mpath, format!("bad rank on line {}", lineno + 1)))?;
                    let dims: Vec<usize> = if fields[3] == "-" {
                        vec![]
                    } else {
                        fields[3]
                            .split(',')
                            .map(|d| d.parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::parse(&mpath, format!("bad dims on line {}", lineno + 1)))?
                    };
                    if dims.len() != rank {
                        return Err(Error::parse(&mpath, format!("rank/dims mismatch on line {}", lineno + 1)));
                    }
                    let trainable = match fields[4] {
                        "0" => false,
                        "1" => true,
                        other => {
                            return Err(Error::parse(
                                &mpath,
                                format!("bad trainable flag {other:?} on line {}", lineno + 1),
                            ))
                        }
                    };
                    let tensor = Tensor::<T>::load_tns(&dir.join(fields[5]))?;
                    if tensor.shape() != dims.as_slice() {
                        return Err(Error::parse(
                            &mpath,
                            format!(
                                "tensor {} has shape {:?}, manifest says {:?}",
                                fields[5],
                                tensor.shape(),
                                dims
                            ),
                        ));
                    }
                    store.insert(name, tensor, trainable)?;
                }
                _ => {
                    return Err(Error::parse(
                        &mpath,
                        format!("unrecognized manifest line {}: {line:?}", lineno + 1),
                    ))
                }
            }
        }
        Ok((store, meta))
    }
}

/// He (fan-in) normal initialization for a convolution weight
/// `[k, k, Cin, Cout]`: zero-mean normal with std `sqrt(2 / (k*k*Cin))`.
/// Draws happen in `f64` and are cast, so all scalar types see identical
/// initializations from the same generator state.
pub fn he_conv_weight<T: Real>(k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    Tensor::from_fn(vec![k, k, cin, cout], |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64(z * std)
    })
}

/// Inserts a conv layer's weight (He normal) and bias (zeros).
pub fn insert_conv<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(format!("{name}.weight"), he_conv_weight(k, cin, cout, rng), true)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]), true)
}

/// Inserts batch-norm parameters for `c` channels: `gamma` = 1, `beta` = 0
/// (trainable) and running `mean` = 0, `var` = 1 (never trainable).
pub fn insert_batchnorm<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::filled(vec![c], T::one()), true)?;
    store.insert(format!("{name}.beta"), Tensor::zeros(vec![c]), true)?;
    store.insert(format!("{name}.mean"), Tensor::zeros(vec![c]), false)?;
    store.insert(format!("{name}.var"), Tensor::filled(vec![c], T::one()), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn insert_get_and_duplicate_rejection() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.weight", Tensor::zeros(vec![3]), true).unwrap();
        assert!(s.get("a.weight").is_ok());
        assert!(s.get("missing").is_err());
        assert!(s.insert("a.weight", Tensor::zeros(vec![3]), true).is_err());
    }

    #[test]
    fn save_load_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        let mut r = rng::stream(1, "init");
        s.insert("conv1.weight", he_conv_weight(3, 2, 4, &mut r), true).unwrap();
        s.insert("conv1.bias", Tensor::zeros(vec![4]), true).unwrap();
        s.insert("bn.mean", Tensor::filled(vec![4], 0.25), false).unwrap();
        s.save(dir.path(), &[("kind", "rec".into()), ("width", "4".into())]).unwrap();

        let (back, meta) = ParamStore::<f32>::load(dir.path()).unwrap();
        assert_eq!(meta.get("kind").unwrap(), "rec");
        assert_eq!(meta.get("width").unwrap(), "4");
        assert_eq!(back.len(), 3);
        // Order, flags, and exact values survive.
        let names: Vec<&str> = back.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["conv1.weight", "conv1.bias", "bn.mean"]);
        assert!(!back.get("bn.mean").unwrap().trainable);
        assert_eq!(back.byte_digest(), s.byte_digest());
    }

    #[test]
    fn save_twice_produces_byte_identical_files() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        let mut r = rng::stream(5, "init");
        s.insert("w", he_conv_weight(1, 3, 3, &mut r), true).unwrap();
        s.save(dir1.path(), &[]).unwrap();
        s.save(dir2.path(), &[]).unwrap();
        for name in ["manifest.txt", "w.tns"] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn digest_changes_with_values_flags_and_names() {
        let mut a = ParamStore::<f32>::new();
        a.insert("w", Tensor::filled(vec![2], 1.0), true).unwrap();
        let mut b = a.clone();
        assert_eq!(a.byte_digest(), b.byte_digest());
        b.get_mut("w").unwrap().tensor.data_mut()[0] = 1.5;
        assert_ne!(a.byte_digest(), b.byte_digest());

        let mut c = a.clone();
        c.get_mut("w").unwrap().trainable = false;
        assert_ne!(a.byte_digest(), c.byte_digest());
    }

    #[test]
    fn he_init_statistics_are_plausible() {
        // std = sqrt(2/(3*3*8)) ~= 0.167; the sample std over 9*8*64 draws
        // should land within a few percent.
        let mut r = rng::stream(7, "init");
        let w: Tensor<f64> = he_conv_weight(3, 8, 64, &mut r);
        let n = w.len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want_std = (2.0 / 72.0f64).sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - want_std).abs() / want_std < 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn init_draws_are_identical_across_scalar_types() {
        let w32: Tensor<f32> = he_conv_weight(3, 2, 2, &mut rng::stream(3, "init"));
        let w64: Tensor<f64> = he_conv_weight(3, 2, 2, &mut rng::stream(3, "init"));
        for (a, b) in w32.data().iter().zip(w64.data()) {
            assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn freeze_all_and_trainable_count() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(vec![4]), true).unwrap();
        s.insert("stats", Tensor::zeros(vec![2]), false).unwrap();
        assert_eq!(s.trainable_scalars(), 4);
        assert!(!s.all_frozen());
        s.freeze_all();
        assert!(s.all_frozen());
        assert_eq!(s.trainable_scalars(), 0);
    }
}
