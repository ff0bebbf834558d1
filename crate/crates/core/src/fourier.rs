//! 2-D discrete Fourier transforms and circular convolution.
//!
//! Boundaries are periodic throughout, so the convolution theorem holds
//! exactly: `DFT(psf ⊗ x) = OTF · DFT(x)`.

use std::cell::RefCell;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::psf::Psf;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform_rows(data: &mut Array2<Complex64>, direction: FftDirection) {
    let width = data.ncols();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft(width, direction));
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for mut row in data.axis_iter_mut(Axis(0)) {
        match row.as_slice_mut() {
            Some(slice) => fft.process_with_scratch(slice, &mut scratch),
            None => {
                let mut buf = row.to_vec();
                fft.process_with_scratch(&mut buf, &mut scratch);
                row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
            }
        }
    }
}

fn transform(input: &Array2<Complex64>, direction: FftDirection) -> Array2<Complex64> {
    let mut rows = input.as_standard_layout().into_owned();
    transform_rows(&mut rows, direction);
    let mut cols = rows.reversed_axes().as_standard_layout().into_owned();
    transform_rows(&mut cols, direction);
    cols.reversed_axes().as_standard_layout().into_owned()
}

/// Unnormalized forward 2-D DFT.
pub fn fft2(input: &Array2<Complex64>) -> Array2<Complex64> {
    transform(input, FftDirection::Forward)
}

/// Inverse 2-D DFT, normalized by `1/N`.
pub fn ifft2(input: &Array2<Complex64>) -> Array2<Complex64> {
    let n = input.len() as f64;
    let mut out = transform(input, FftDirection::Inverse);
    out.mapv_inplace(|v| v / n);
    out
}

pub fn fft2_real(input: &Array2<f64>) -> Array2<Complex64> {
    fft2(&input.mapv(|v| Complex64::new(v, 0.0)))
}

/// Real part of the inverse transform.
pub fn ifft2_real(input: &Array2<Complex64>) -> Array2<f64> {
    ifft2(input).mapv(|v| v.re)
}

/// Place `kernel` on a zero grid of `grid` size with its center
/// `(kh/2, kw/2)` wrapped to the origin.
pub fn embed_kernel(kernel: &Array2<f64>, grid: (usize, usize)) -> Array2<f64> {
    let (kh, kw) = kernel.dim();
    let (ch, cw) = (kh / 2, kw / 2);
    let (h, w) = grid;
    let mut out = Array2::zeros(grid);
    for ((r, c), &v) in kernel.indexed_iter() {
        let rr = (r + h - ch % h) % h;
        let cc = (c + w - cw % w) % w;
        out[[rr, cc]] += v;
    }
    out
}

/// Multiply the spectrum of `field` by `transfer` (or its conjugate) and
/// return the real part of the inverse transform.
pub fn apply_transfer(field: &Array2<f64>, transfer: &Array2<Complex64>, conjugate: bool) -> Array2<f64> {
    let mut spec = fft2_real(field);
    if conjugate {
        spec.zip_mut_with(transfer, |s, t| *s *= t.conj());
    } else {
        spec.zip_mut_with(transfer, |s, t| *s *= t);
    }
    ifft2_real(&spec)
}

fn check_grid(image: &Image, psf: &Psf) -> Result<()> {
    if image.dims() != psf.grid() {
        return Err(Error::OtfSizeMismatch {
            otf: psf.grid(),
            image: image.dims(),
        });
    }
    Ok(())
}

/// Circular convolution `psf ⊗ image`:
/// `y[i, j] = Σ k[a, b] · x[i − a + ch, j − b + cw]` with indices mod the grid.
pub fn convolve(image: &Image, psf: &Psf) -> Result<Image> {
    check_grid(image, psf)?;
    Image::new(apply_transfer(image.pixels(), psf.otf(), false))
}

/// Adjoint of [`convolve`] (circular correlation with the kernel).
pub fn correlate(image: &Image, psf: &Psf) -> Result<Image> {
    check_grid(image, psf)?;
    Image::new(apply_transfer(image.pixels(), psf.otf(), true))
}

/// Signed frequency index for DFT bin `k` of an `n`-point transform.
pub fn signed_frequency(k: usize, n: usize) -> isize {
    if k <= n / 2 {
        k as isize
    } else {
        k as isize - n as isize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal double loop over the kernel support, periodic indices.
    fn spatial_convolve(x: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
        let (h, w) = x.dim();
        let (kh, kw) = k.dim();
        let (ch, cw) = (kh as isize / 2, kw as isize / 2);
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for a in 0..kh as isize {
                for b in 0..kw as isize {
                    let r = (i as isize - a + ch).rem_euclid(h as isize) as usize;
                    let c = (j as isize - b + cw).rem_euclid(w as isize) as usize;
                    acc += k[[a as usize, b as usize]] * x[[r, c]];
                }
            }
            acc
        })
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn fft_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 12, 10);
        let back = ifft2_real(&fft2_real(x.pixels()));
        for (a, b) in x.pixels().iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 16, 16);
        let psf = Psf::delta((16, 16));
        let y = convolve(&x, &psf).unwrap();
        for (a, b) in x.pixels().iter().zip(y.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_is_preserved() {
        let x = Image::filled(16, 16, 0.37).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Array2::from_shape_fn((5, 5), |_| rng.random::<f64>());
        let psf = Psf::new(k, (16, 16)).unwrap();
        let y = convolve(&x, &psf).unwrap();
        assert!(y.pixels().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn uniform_3x3_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(&mut rng, 16, 16);
        let k = Array2::from_elem((3, 3), 1.0 / 9.0);
        let psf = Psf::new(k.clone(), (16, 16)).unwrap();
        let fast = convolve(&x, &psf).unwrap();
        let slow = spatial_convolve(x.pixels(), &k);
        for (a, b) in fast.pixels().iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn asymmetric_even_kernel_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_image(&mut rng, 11, 14);
        let mut k = Array2::from_shape_fn((4, 6), |_| rng.random::<f64>());
        k /= k.sum();
        let psf = Psf::new(k.clone(), (11, 14)).unwrap();
        let fast = convolve(&x, &psf).unwrap();
        let slow = spatial_convolve(x.pixels(), &k);
        for (a, b) in fast.pixels().iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn correlate_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_image(&mut rng, 12, 12);
        let v = random_image(&mut rng, 12, 12);
        let k = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>());
        let psf = Psf::new(k, (12, 12)).unwrap();
        let lhs: f64 = (convolve(&u, &psf).unwrap().pixels() * v.pixels()).sum();
        let rhs: f64 = (u.pixels() * correlate(&v, &psf).unwrap().pixels()).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let x = Image::zeros(16, 16).unwrap();
        let psf = Psf::delta((32, 32));
        assert!(matches!(convolve(&x, &psf), Err(Error::OtfSizeMismatch { .. })));
    }
}
