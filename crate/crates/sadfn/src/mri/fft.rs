//! Unitary 2-D discrete Fourier transforms.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform;
//! every other length goes through Bluestein's chirp-z algorithm, which
//! re-expresses a length-`n` DFT as a circular convolution of length
//! `>= 2n-1`, evaluated with the radix-2 path. Twiddle factors and chirps
//! are computed in `f64` and cast to the working scalar type, so `f32`
//! transforms lose no accuracy to table construction.
//!
//! Both [`fft2`] and [`ifft2`] scale by `1/sqrt(H*W)`, making the pair
//! unitary: norms are preserved and each is the other's exact inverse up
//! to round-off.

use super::ComplexGrid;
use crate::Real;
use num_complex::Complex;
use std::f64::consts::PI;

/// Unnormalized 1-D DFT (forward: `e^{-2*pi*i*jk/n}` kernel) in place.
pub(crate) fn fft1d<T: Real>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        bluestein(buf, inverse);
    }
}

/// Iterative radix-2 Cooley-Tukey, power-of-two length.
fn radix2<T: Real>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();

    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }

    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2usize;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        let twiddles: Vec<Complex<T>> = (0..half)
            .map(|k| {
                let a = step * k as f64;
                Complex::new(T::from_f64(a.cos()), T::from_f64(a.sin()))
            })
            .collect();
        let mut i = 0;
        while i < n {
            for k in 0..half {
                let u = buf[i + k];
                let v = buf[i + k + half] * twiddles[k];
                buf[i + k] = u + v;
                buf[i + k + half] = u - v;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Bluestein chirp-z transform for arbitrary length.
fn bluestein<T: Real>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };

    // Chirp w_j = exp(sign * pi*i * j^2 / n) (sign = -1 forward), with j^2
    // reduced mod 2n to keep the trig argument small and accurate.
    let chirp: Vec<Complex<f64>> = (0..n)
        .map(|j| {
            let q = ((j as u64 * j as u64) % (2 * n as u64)) as f64;
            let a = sign * PI * q / n as f64;
            Complex::new(a.cos(), a.sin())
        })
        .collect();

    // a = x .* chirp, zero-padded to m.
    let mut a = vec![Complex::<T>::new(T::zero(), T::zero()); m];
    for j in 0..n {
        let c = Complex::new(T::from_f64(chirp[j].re), T::from_f64(chirp[j].im));
        a[j] = buf[j] * c;
    }

    // b = conj(chirp) arranged circularly: b[0..n) and b[m-j] = b[j].
    let mut b = vec![Complex::<T>::new(T::zero(), T::zero()); m];
    for j in 0..n {
        let c = Complex::new(T::from_f64(chirp[j].re), T::from_f64(-chirp[j].im));
        b[j] = c;
        if j > 0 {
            b[m - j] = c;
        }
    }

    radix2(&mut a, false);
    radix2(&mut b, false);
    for (av, bv) in a.iter_mut().zip(&b) {
        *av = *av * *bv;
    }
    radix2(&mut a, true);
    let inv_m = T::from_f64(1.0 / m as f64);

    for j in 0..n {
        let c = Complex::new(T::from_f64(chirp[j].re), T::from_f64(chirp[j].im));
        buf[j] = a[j] * c * inv_m;
    }
}

/// Applies the unnormalized 1-D transform along rows, then columns.
fn fft2_inplace<T: Real>(grid: &mut ComplexGrid<T>, inverse: bool) {
    let (h, w) = grid.dims();
    let data = grid.data_mut();
    for row in data.chunks_exact_mut(w) {
        fft1d(row, inverse);
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        fft1d(&mut col, inverse);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Unitary 2-D forward DFT.
pub fn fft2<T: Real>(grid: &ComplexGrid<T>) -> ComplexGrid<T> {
    let mut out = grid.clone();
    fft2_inplace(&mut out, false);
    let (h, w) = out.dims();
    let s = T::from_f64(1.0 / ((h * w) as f64).sqrt());
    for v in out.data_mut() {
        *v = *v * s;
    }
    out
}

/// Unitary 2-D inverse DFT.
pub fn ifft2<T: Real>(grid: &ComplexGrid<T>) -> ComplexGrid<T> {
    let mut out = grid.clone();
    fft2_inplace(&mut out, true);
    let (h, w) = out.dims();
    let s = T::from_f64(1.0 / ((h * w) as f64).sqrt());
    for v in out.data_mut() {
        *v = *v * s;
    }
    out
}
