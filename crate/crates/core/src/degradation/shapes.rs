use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psf::{Psf, PsfShape};
use crate::rng::SeedTree;

/// Gaussian kernels are truncated at this many standard deviations.
const GAUSSIAN_TRUNCATION: f64 = 6.0;

fn support_radius(r: f64) -> usize {
    r.ceil().max(0.0) as usize
}

fn radial_kernel(radius: usize, weight: impl Fn(f64) -> f64) -> Array2<f64> {
    let n = 2 * radius + 1;
    let c = radius as f64;
    Array2::from_shape_fn((n, n), |(r, col)| {
        let dy = r as f64 - c;
        let dx = col as f64 - c;
        weight(dx * dx + dy * dy)
    })
}

fn gaussian_kernel(sigma: f64) -> Array2<f64> {
    let radius = support_radius(GAUSSIAN_TRUNCATION * sigma).max(1);
    let two_s2 = 2.0 * sigma * sigma;
    radial_kernel(radius, |d2| (-d2 / two_s2).exp())
}

/// Builds the kernel of `shape` and its OTF on a `grid` of `(height, width)`.
///
/// Disks and annuli include a pixel when its center distance `d` satisfies
/// `d <= radius` (`r_in < d <= r_out`), so a disk below unit radius is a
/// delta.
pub fn make_psf(shape: PsfShape, grid: (usize, usize)) -> Result<Psf> {
    let kernel = match shape {
        PsfShape::Disk { radius } => {
            if !(radius > 0.0) || !radius.is_finite() {
                return Err(Error::InvalidPsf(format!("disk radius must be positive, got {radius}")));
            }
            let r2 = radius * radius;
            radial_kernel(radius.floor() as usize, |d2| if d2 <= r2 { 1.0 } else { 0.0 })
        }
        PsfShape::Gaussian { sigma } => {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::InvalidPsf(format!(
                    "gaussian sigma must be positive, got {sigma}"
                )));
            }
            gaussian_kernel(sigma)
        }
        PsfShape::Annulus { r_in, r_out } => {
            if !(r_in >= 0.0 && r_out > r_in) || !r_out.is_finite() {
                return Err(Error::InvalidPsf(format!(
                    "annulus needs 0 <= r_in < r_out, got {r_in}, {r_out}"
                )));
            }
            let (a2, b2) = (r_in * r_in, r_out * r_out);
            let k = radial_kernel(r_out.floor() as usize, |d2| if d2 > a2 && d2 <= b2 { 1.0 } else { 0.0 });
            if k.sum() == 0.0 {
                return Err(Error::InvalidPsf(format!("annulus {r_in}..{r_out} covers no pixel")));
            }
            k
        }
    };
    Psf::new(kernel, grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    /// Convolve the kernel with a Gaussian of this sigma.
    Blur { sigma: f64 },
    /// Add zero-mean Gaussian noise with std `level_percent / 100 · max(kernel)`.
    Noise { level_percent: f64 },
}

impl Perturbation {
    pub fn is_identity(&self) -> bool {
        match *self {
            Perturbation::Blur { sigma } => sigma == 0.0,
            Perturbation::Noise { level_percent } => level_percent == 0.0,
        }
    }
}

impl std::fmt::Display for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Perturbation::Blur { sigma } => write!(f, "blur(s={sigma})"),
            Perturbation::Noise { level_percent } => write!(f, "noise({level_percent}%)"),
        }
    }
}

/// Linear (zero-padded) convolution of two small kernels.
fn full_convolve(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ah, aw) = a.dim();
    let (bh, bw) = b.dim();
    let mut out = Array2::zeros((ah + bh - 1, aw + bw - 1));
    for ((i, j), &av) in a.indexed_iter() {
        if av == 0.0 {
            continue;
        }
        for ((k, l), &bv) in b.indexed_iter() {
            out[[i + k, j + l]] += av * bv;
        }
    }
    out
}

/// A mismatched copy of `psf` for robustness studies, on the same grid.
pub fn perturb_psf(psf: &Psf, mode: Perturbation, seed: u64) -> Result<Psf> {
    if mode.is_identity() {
        return Ok(psf.clone());
    }
    let kernel = match mode {
        Perturbation::Blur { sigma } => {
            if !(sigma > 0.0) {
                return Err(Error::InvalidArgument(format!("blur sigma must be >= 0, got {sigma}")));
            }
            full_convolve(psf.kernel(), &gaussian_kernel(sigma))
        }
        Perturbation::Noise { level_percent } => {
            if !(level_percent > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "noise level must be >= 0, got {level_percent}"
                )));
            }
            let peak = psf.kernel().fold(0.0f64, |m, &v| m.max(v));
            let normal =
                Normal::new(0.0, level_percent / 100.0 * peak).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut rng = SeedTree::new(seed).child("psf-noise").rng();
            let noisy = psf.kernel().mapv(|v| (v + normal.sample(&mut rng)).max(0.0));
            if noisy.sum() <= 0.0 {
                return Err(Error::InvalidPsf("kernel vanished after clipping".into()));
            }
            noisy
        }
    };
    Psf::new(kernel, psf.grid())
}

/// Surrogate for benchmark PSF `level` (1 mildest, 5 most severe).
pub fn benchmark_psf(level: u8) -> Result<PsfShape> {
    Ok(match level {
        1 => PsfShape::Gaussian { sigma: 1.0 },
        2 => PsfShape::Disk { radius: 2.0 },
        3 => PsfShape::Disk { radius: 3.0 },
        4 => PsfShape::Disk { radius: 4.5 },
        5 => PsfShape::Annulus { r_in: 3.0, r_out: 6.0 },
        _ => {
            return Err(Error::InvalidArgument(format!(
                "no benchmark PSF psf-{level}; use 1..=5"
            )))
        }
    })
}

/// Parses labels like `psf-4`.
pub fn benchmark_psf_by_label(label: &str) -> Result<PsfShape> {
    let level = label
        .strip_prefix("psf-")
        .and_then(|s| s.parse::<u8>().ok())
        .ok_or_else(|| Error::InvalidArgument(format!("unknown PSF label {label:?}")))?;
    benchmark_psf(level)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_disk_is_delta() {
        let p = make_psf(PsfShape::Disk { radius: 1e-9 }, (16, 16)).unwrap();
        assert_eq!(p.kernel().dim(), (1, 1));
        assert_eq!(p.kernel()[[0, 0]], 1.0);
    }

    #[test]
    fn disk_pixel_count() {
        let p = make_psf(PsfShape::Disk { radius: 1.5 }, (16, 16)).unwrap();
        assert_eq!(p.kernel().dim(), (3, 3));
        assert_eq!(p.kernel().iter().filter(|&&v| v > 0.0).count(), 9);
    }

    #[test]
    fn invalid_shapes() {
        assert!(make_psf(PsfShape::Disk { radius: 0.0 }, (16, 16)).is_err());
        assert!(make_psf(PsfShape::Gaussian { sigma: -1.0 }, (16, 16)).is_err());
        assert!(make_psf(PsfShape::Annulus { r_in: 3.0, r_out: 2.0 }, (16, 16)).is_err());
        assert!(make_psf(PsfShape::Disk { radius: 9.0 }, (16, 16)).is_err());
    }

    #[test]
    fn annulus_has_hole() {
        let p = make_psf(PsfShape::Annulus { r_in: 2.0, r_out: 4.0 }, (32, 32)).unwrap();
        assert_eq!(p.kernel()[[4, 4]], 0.0);
        assert!(p.kernel()[[4, 8]] > 0.0);
    }

    #[test]
    fn tiny_blur_keeps_kernel() {
        let p = make_psf(PsfShape::Disk { radius: 3.0 }, (32, 32)).unwrap();
        let q = perturb_psf(&p, Perturbation::Blur { sigma: 1e-9 }, 0).unwrap();
        let (kh, kw) = p.kernel().dim();
        let (qh, qw) = q.kernel().dim();
        let (oy, ox) = ((qh - kh) / 2, (qw - kw) / 2);
        for ((r, c), &v) in q.kernel().indexed_iter() {
            let orig = if r >= oy && r < oy + kh && c >= ox && c < ox + kw {
                p.kernel()[[r - oy, c - ox]]
            } else {
                0.0
            };
            assert!((v - orig).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let p = make_psf(PsfShape::Disk { radius: 3.0 }, (32, 32)).unwrap();
        assert_eq!(
            perturb_psf(&p, Perturbation::Noise { level_percent: 0.0 }, 5).unwrap(),
            p
        );
        assert_eq!(perturb_psf(&p, Perturbation::Blur { sigma: 0.0 }, 5).unwrap(), p);
    }

    #[test]
    fn blur_preserves_invariants() {
        let p = make_psf(PsfShape::Disk { radius: 5.0 }, (64, 64)).unwrap();
        for mode in [
            Perturbation::Blur { sigma: 1.0 },
            Perturbation::Noise { level_percent: 5.0 },
        ] {
            let q = perturb_psf(&p, mode, 2).unwrap();
            assert!((q.kernel().sum() - 1.0).abs() < 1e-12);
            assert!(q.kernel().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn labels() {
        assert_eq!(benchmark_psf_by_label("psf-4").unwrap(), PsfShape::Disk { radius: 4.5 });
        assert!(benchmark_psf_by_label("psf-9").is_err());
        assert!(benchmark_psf_by_label("foo").is_err());
    }
}
