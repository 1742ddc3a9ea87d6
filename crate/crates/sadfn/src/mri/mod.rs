//! The compressed-sensing MRI measurement model.
//!
//! An image `x` is measured in k-space through a unitary 2-D DFT restricted
//! to a sampling mask: `y = M . F x`. This module provides:
//!
//! * [`ComplexGrid`] — a complex-valued k-space grid;
//! * [`fft2`]/[`ifft2`] — the unitary transform pair (see [`fft`]);
//! * [`SamplingMask`] — conjugate-symmetric sampling patterns (see [`mask`]);
//! * [`undersample`] — simulates the measurement `y` from an image;
//! * [`zero_filled`] — the adjoint reconstruction `Re(F^H y)`;
//! * [`data_fidelity`] — the projection that replaces the k-space of a
//!   network output with the measured values at sampled frequencies;
//! * [`DataFidelityOp`] — the same projection as a differentiable graph
//!   operation.

pub mod fft;
pub mod mask;

pub use fft::{fft2, ifft2};
pub use mask::{MaskKind, SamplingMask};

use crate::tensor::{CustomOp, Tensor};
use crate::{Error, Real, Result};
use num_complex::Complex;
use std::path::Path;
use std::sync::Arc;

/// Dense complex grid (k-space or complex image plane).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid<T> {
    h: usize,
    w: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> ComplexGrid<T> {
    /// All-zeros grid.
    pub fn zeros(h: usize, w: usize) -> Self {
        ComplexGrid {
            h,
            w,
            data: vec![Complex::new(T::zero(), T::zero()); h * w],
        }
    }

    /// Embeds a real-valued rank-2 tensor as a complex grid.
    pub fn from_real(x: &Tensor<T>) -> Result<Self> {
        let (h, w) = x.hw()?;
        Ok(ComplexGrid {
            h,
            w,
            data: x.data().iter().map(|&v| Complex::new(v, T::zero())).collect(),
        })
    }

    /// Grid dimensions `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Flat row-major data.
    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    /// Mutable flat data.
    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    /// Real part as a rank-2 tensor.
    pub fn re_tensor(&self) -> Tensor<T> {
        Tensor::from_fn(vec![self.h, self.w], |i| self.data[i].re)
    }

    /// Element-wise conversion to another scalar type (via `f64`).
    pub fn cast<U: Real>(&self) -> ComplexGrid<U> {
        ComplexGrid {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|c| Complex::new(U::from_f64(c.re.to_f64()), U::from_f64(c.im.to_f64())))
                .collect(),
        }
    }

    /// Largest absolute component difference against another grid.
    pub fn max_abs_diff(&self, other: &ComplexGrid<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let dr = (a.re - b.re).to_f64().abs();
                let di = (a.im - b.im).to_f64().abs();
                dr.max(di)
            })
            .fold(0.0, f64::max)
    }

    /// Saves as `.tns` with shape `[H, W, 2]` (real, imaginary).
    pub fn save_tns(&self, path: &Path) -> Result<()> {
        let mut t = Tensor::<T>::zeros(vec![self.h, self.w, 2]);
        for (i, c) in self.data.iter().enumerate() {
            t.data_mut()[2 * i] = c.re;
            t.data_mut()[2 * i + 1] = c.im;
        }
        t.save_tns(path)
    }

    /// Loads a grid written by [`ComplexGrid::save_tns`].
    pub fn load_tns(path: &Path) -> Result<Self> {
        let t = Tensor::<T>::load_tns(path)?;
        let (h, w) = match t.shape()[..] {
            [h, w, 2] => (h, w),
            _ => {
                return Err(Error::parse(
                    path,
                    format!("expected shape [H, W, 2], got {:?}", t.shape()),
                ))
            }
        };
        let data = t
            .data()
            .chunks_exact(2)
            .map(|c| Complex::new(c[0], c[1]))
            .collect();
        Ok(ComplexGrid { h, w, data })
    }
}

fn check_mask_dims<T: Real>(grid_dims: (usize, usize), mask: &SamplingMask, context: &str) -> Result<()> {
    let _ = std::marker::PhantomData::<T>;
    if grid_dims != mask.dims() {
        return Err(Error::shape(
            context,
            format!("mask dims {:?}", mask.dims()),
            format!("{grid_dims:?}"),
        ));
    }
    Ok(())
}

/// Checks that `y` is a plausible measurement under `mask`: matching
/// dimensions and exactly zero at unsampled frequencies.
pub fn check_measurement<T: Real>(y: &ComplexGrid<T>, mask: &SamplingMask, context: &str) -> Result<()> {
    check_mask_dims::<T>(y.dims(), mask, context)?;
    for (v, &m) in y.data().iter().zip(mask.flags()) {
        if !m && (v.re != T::zero() || v.im != T::zero()) {
            return Err(Error::Invalid(format!(
                "{context}: measurement has nonzero values at unsampled frequencies"
            )));
        }
    }
    Ok(())
}

/// Simulates the k-space measurement of a real image: `y = M . fft2(x)`,
/// zero at unsampled frequencies.
pub fn undersample<T: Real>(x: &Tensor<T>, mask: &SamplingMask) -> Result<ComplexGrid<T>> {
    let grid = ComplexGrid::from_real(x)?;
    check_mask_dims::<T>(grid.dims(), mask, "undersample")?;
    let mut k = fft2(&grid);
    for (v, &m) in k.data_mut().iter_mut().zip(mask.flags()) {
        if !m {
            *v = Complex::new(T::zero(), T::zero());
        }
    }
    Ok(k)
}

/// Zero-filled reconstruction `Re(ifft2(y))`: the adjoint of the
/// measurement applied to the data. Rejects measurements with energy at
/// unsampled frequencies.
pub fn zero_filled<T: Real>(y: &ComplexGrid<T>, mask: &SamplingMask) -> Result<Tensor<T>> {
    check_measurement(y, mask, "zero_filled")?;
    Ok(ifft2(y).re_tensor())
}

/// Data-fidelity projection: transforms `x` to k-space, replaces sampled
/// frequencies with the measured values `y`, transforms back, and keeps
/// the real part.
///
/// With the conjugate-symmetric masks produced by [`mask`], this is an
/// exact projection for real images: applying it twice equals applying it
/// once, and the output's k-space matches `y` exactly at sampled
/// frequencies.
pub fn data_fidelity<T: Real>(
    x: &Tensor<T>,
    y: &ComplexGrid<T>,
    mask: &SamplingMask,
) -> Result<Tensor<T>> {
    check_measurement(y, mask, "data_fidelity")?;
    let grid = ComplexGrid::from_real(x)?;
    check_mask_dims::<T>(grid.dims(), mask, "data_fidelity")?;
    let mut k = fft2(&grid);
    for ((v, &m), yv) in k.data_mut().iter_mut().zip(mask.flags()).zip(y.data()) {
        if m {
            *v = *yv;
        }
    }
    Ok(ifft2(&k).re_tensor())
}

/// Gradient of [`data_fidelity`] with respect to `x`: the measured
/// frequencies of the output do not depend on `x`, so the gradient keeps
/// only the unsampled part, `Re(ifft2((1 - M) . fft2(g)))`. The operator
/// is linear and self-adjoint in `x`, hence identical in forward and
/// reverse form.
pub fn data_fidelity_vjp<T: Real>(grad_out: &Tensor<T>, mask: &SamplingMask) -> Result<Tensor<T>> {
    let grid = ComplexGrid::from_real(grad_out)?;
    check_mask_dims::<T>(grid.dims(), mask, "data_fidelity_vjp")?;
    let mut k = fft2(&grid);
    for (v, &m) in k.data_mut().iter_mut().zip(mask.flags()) {
        if m {
            *v = Complex::new(T::zero(), T::zero());
        }
    }
    Ok(ifft2(&k).re_tensor())
}

/// [`data_fidelity`] as a differentiable graph operation over a rank-2
/// `[H, W]` input. The measurement and mask are captured at construction
/// (validated once) and shared across instances.
pub struct DataFidelityOp<T: Real> {
    y: Arc<ComplexGrid<T>>,
    mask: Arc<SamplingMask>,
}

impl<T: Real> DataFidelityOp<T> {
    /// Validates the measurement/mask pair and captures it.
    pub fn new(y: Arc<ComplexGrid<T>>, mask: Arc<SamplingMask>) -> Result<Self> {
        check_measurement(&y, &mask, "DataFidelityOp")?;
        Ok(DataFidelityOp { y, mask })
    }
}

impl<T: Real> CustomOp<T> for DataFidelityOp<T> {
    fn name(&self) -> &str {
        "data_fidelity"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if inputs.len() != 1 {
            return Err(Error::Invalid("data_fidelity takes exactly one input".into()));
        }
        data_fidelity(inputs[0], &self.y, &self.mask)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
    ) -> Result<Vec<Option<Vec<T>>>> {
        let g = Tensor::new(inputs[0].shape().to_vec(), grad_out.to_vec())?;
        let dx = data_fidelity_vjp(&g, &self.mask)?;
        Ok(vec![Some(dx.data().to_vec())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "mri-test");
        Tensor::from_fn(vec![h, w], |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn undersample_zeroes_unmeasured_frequencies() {
        let mask = SamplingMask::random2d(16, 16, 0.25, 3).unwrap();
        let y = undersample(&random_image(16, 16, 1), &mask).unwrap();
        for (v, &m) in y.data().iter().zip(mask.flags()) {
            if !m {
                assert_eq!(v.norm_sqr(), 0.0);
            }
        }
        assert!(check_measurement(&y, &mask, "test").is_ok());
    }

    #[test]
    fn zero_filled_rejects_energy_off_the_mask() {
        let mask = SamplingMask::random2d(8, 8, 0.25, 3).unwrap();
        let mut y = undersample(&random_image(8, 8, 2), &mask).unwrap();
        // Corrupt one unsampled frequency.
        let bad = mask.flags().iter().position(|&m| !m).unwrap();
        y.data_mut()[bad] = num_complex::Complex::new(1e-3, 0.0);
        assert!(zero_filled(&y, &mask).is_err());
    }

    #[test]
    fn full_mask_roundtrips_the_image() {
        let mask = SamplingMask::random2d(12, 12, 1.0, 1).unwrap();
        assert_eq!(mask.ones(), 144);
        let x = random_image(12, 12, 5);
        let y = undersample(&x, &mask).unwrap();
        let back = zero_filled(&y, &mask).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn data_fidelity_is_idempotent_and_consistent() {
        let mask = SamplingMask::cartesian1d(24, 24, 0.3, 7).unwrap();
        let truth = random_image(24, 24, 11);
        let y = undersample(&truth, &mask).unwrap();
        let x = random_image(24, 24, 12);

        let once = data_fidelity(&x, &y, &mask).unwrap();
        let twice = data_fidelity(&once, &y, &mask).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-9, "not idempotent: {a} vs {b}");
        }

        // The output's spectrum matches the measurement on the mask.
        let k = fft2(&ComplexGrid::from_real(&once).unwrap());
        for ((kv, yv), &m) in k.data().iter().zip(y.data()).zip(mask.flags()) {
            if m {
                assert!((kv - yv).norm() < 1e-9, "not consistent: {kv} vs {yv}");
            }
        }
    }

    #[test]
    fn data_fidelity_with_matching_input_is_identity() {
        // If x already satisfies the measurements, the projection fixes it.
        let mask = SamplingMask::random2d(16, 16, 0.3, 2).unwrap();
        let truth = random_image(16, 16, 21);
        let y = undersample(&truth, &mask).unwrap();
        let x = zero_filled(&y, &mask).unwrap();
        let out = data_fidelity(&x, &y, &mask).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn data_fidelity_op_gradient_passes_finite_differences() {
        let mask = SamplingMask::random2d(8, 8, 0.3, 4).unwrap();
        let y = Arc::new(undersample(&random_image(8, 8, 31), &mask).unwrap());
        let mask = Arc::new(mask);
        let input = random_image(8, 8, 32);
        let target = random_image(8, 8, 33);
        // The map is linear and the loss quadratic, so central differences
        // are exact up to round-off; a larger step keeps round-off small.
        let err = crate::tensor::gradcheck::grad_check(
            &mut |g, x| {
                let op = DataFidelityOp::new(Arc::clone(&y), Arc::clone(&mask))?;
                let out = g.apply_custom(Box::new(op), &[x])?;
                g.sq_diff_sum(out, &target)
            },
            &input,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "data_fidelity gradient error {err}");
    }

    #[test]
    fn data_fidelity_op_rejects_bad_measurement() {
        let mask = SamplingMask::random2d(8, 8, 0.3, 4).unwrap();
        let mut y = undersample(&random_image(8, 8, 31), &mask).unwrap();
        let bad = mask.flags().iter().position(|&m| !m).unwrap();
        y.data_mut()[bad] = num_complex::Complex::new(0.5, 0.5);
        assert!(DataFidelityOp::new(Arc::new(y), Arc::new(mask)).is_err());
    }

    #[test]
    fn complex_grid_tns_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.tns");
        let mask = SamplingMask::random2d(8, 8, 0.5, 1).unwrap();
        let y: ComplexGrid<f32> = undersample(&random_image(8, 8, 41), &mask)
            .unwrap()
            .cast();
        y.save_tns(&path).unwrap();
        let back = ComplexGrid::<f32>::load_tns(&path).unwrap();
        assert_eq!(back, y);
    }

    #[test]
    fn parseval_energy_is_preserved_by_undersampling_at_full_fraction() {
        let x = random_image(16, 16, 51);
        let mask = SamplingMask::random2d(16, 16, 1.0, 1).unwrap();
        let y = undersample(&x, &mask).unwrap();
        let e_img: f64 = x.data().iter().map(|v| v * v).sum();
        let e_k: f64 = y.data().iter().map(|v| v.norm_sqr()).sum();
        assert!((e_img - e_k).abs() < 1e-10 * e_img.max(1.0));
    }
}
