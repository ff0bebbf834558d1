//! Image quality metrics.
//!
//! SSIM uses a 7×7 uniform window over every fully contained position, the
//! sample (N−1) covariance estimate, `L = 1`, `C1 = (0.01 L)²`,
//! `C2 = (0.03 L)²`. PSNR is capped at [`PSNR_CAP_DB`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
}

impl QualityReport {
    /// PSNR (peak 1) and SSIM of `test` against `reference`.
    pub fn compute(reference: &Image, test: &Image) -> Result<Self> {
        Ok(Self {
            psnr: psnr(reference, test, 1.0)?,
            ssim: ssim(reference, test)?,
        })
    }
}

pub fn mse(reference: &Image, test: &Image) -> Result<f64> {
    reference.ensure_same_dims(test)?;
    let sum: f64 = reference
        .pixels()
        .iter()
        .zip(test.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.len() as f64)
}

pub fn psnr(reference: &Image, test: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let err = mse(reference, test)?;
    if err < 1e-20 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / err).log10()).min(PSNR_CAP_DB))
}

pub fn ssim(reference: &Image, test: &Image) -> Result<f64> {
    reference.ensure_same_dims(test)?;
    let (h, w) = reference.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = n / (n - 1.0);

    let a = reference.pixels();
    let b = test.pixels();
    // Summed-area tables of x, y, x², y², xy give each window in O(1).
    let tables = [
        integral(h, w, |r, c| a[[r, c]]),
        integral(h, w, |r, c| b[[r, c]]),
        integral(h, w, |r, c| a[[r, c]] * a[[r, c]]),
        integral(h, w, |r, c| b[[r, c]] * b[[r, c]]),
        integral(h, w, |r, c| a[[r, c]] * b[[r, c]]),
    ];
    let window = |t: &Vec<f64>, r: usize, c: usize| {
        let s = SSIM_WINDOW;
        let at = |rr: usize, cc: usize| t[rr * (w + 1) + cc];
        (at(r + s, c + s) - at(r, c + s) - at(r + s, c) + at(r, c)) / n
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let mx = window(&tables[0], r, c);
            let my = window(&tables[1], r, c);
            let vx = cov_norm * (window(&tables[2], r, c) - mx * mx);
            let vy = cov_norm * (window(&tables[3], r, c) - my * my);
            let vxy = cov_norm * (window(&tables[4], r, c) - mx * my);
            let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn integral(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let stride = w + 1;
    let mut t = vec![0.0; (h + 1) * stride];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += f(r, c);
            t[(r + 1) * stride + c + 1] = t[r * stride + c + 1] + row;
        }
    }
    t
}

/// Pearson correlation of two equally sized images. Zero when either is
/// constant.
pub fn pearson(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.pixels().iter().zip(b.pixels()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn checkerboard(n: usize) -> Image {
        Image::from_fn(n, n, |(r, c)| if (r / 2 + c / 2) % 2 == 0 { 0.8 } else { 0.2 }).unwrap()
    }

    /// Per-window loops straight from the SSIM definition.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let (h, w) = a.dims();
        let s = SSIM_WINDOW;
        let n = (s * s) as f64;
        let (c1, c2) = (1e-4, 9e-4);
        let mut acc = 0.0;
        let mut count = 0.0;
        for r in 0..=h - s {
            for c in 0..=w - s {
                let xs: Vec<f64> = (0..s * s).map(|k| a.get(r + k / s, c + k % s)).collect();
                let ys: Vec<f64> = (0..s * s).map(|k| b.get(r + k / s, c + k % s)).collect();
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (n - 1.0);
                let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (n - 1.0);
                let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn psnr_cases() {
        let zero = Image::zeros(8, 8).unwrap();
        let one = Image::filled(8, 8, 1.0).unwrap();
        assert_eq!(psnr(&zero, &zero, 1.0).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&zero, &one, 1.0).unwrap().abs() < 1e-12);
        let r = checkerboard(16);
        let shifted = r.offset(0.1).unwrap();
        assert!((psnr(&r, &shifted, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&r, &shifted, 0.0).is_err());
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = checkerboard(16);
        let b = a.map(|v| v * 0.9 + 0.03).unwrap();
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = checkerboard(16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 1.0);
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let a = checkerboard(16);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let b = a.map(|v| v + noise.sample(&mut rng)).unwrap();
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_reference(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }

    #[test]
    fn ssim_rejects_tiny_and_mismatched() {
        let a = Image::zeros(8, 8).unwrap();
        let b = Image::zeros(8, 9).unwrap();
        assert!(ssim(&a, &b).is_err());
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn pearson_of_affine_copy_is_one() {
        let a = checkerboard(12);
        let b = a.map(|v| 3.0 * v - 1.0).unwrap();
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }
}
