use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{embed_kernel, fft2_real};

/// A normalized, non-negative convolution kernel with its optical transfer
/// function cached for one image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    kernel: Array2<f64>,
    otf: Array2<Complex64>,
}

impl Psf {
    /// Normalizes `kernel` to unit sum and computes its OTF on `grid`.
    pub fn new(kernel: Array2<f64>, grid: (usize, usize)) -> Result<Self> {
        let (kh, kw) = kernel.dim();
        if kh == 0 || kw == 0 {
            return Err(Error::InvalidPsf("empty kernel".into()));
        }
        if kh > grid.0 || kw > grid.1 {
            return Err(Error::InvalidPsf(format!(
                "kernel {kh}x{kw} does not fit grid {}x{}",
                grid.0, grid.1
            )));
        }
        if kernel.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidPsf(
                "kernel entries must be finite and non-negative".into(),
            ));
        }
        let total = kernel.sum();
        if total <= 0.0 {
            return Err(Error::InvalidPsf("kernel sums to zero".into()));
        }
        let kernel = kernel / total;
        let otf = fft2_real(&embed_kernel(&kernel, grid));
        Ok(Self { kernel, otf })
    }

    pub fn delta(grid: (usize, usize)) -> Self {
        Self::new(Array2::from_elem((1, 1), 1.0), grid).expect("1x1 kernel fits any grid")
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    pub fn otf(&self) -> &Array2<Complex64> {
        &self.otf
    }

    /// Grid the OTF was computed for, `(height, width)`.
    pub fn grid(&self) -> (usize, usize) {
        self.otf.dim()
    }

    /// Same kernel, OTF recomputed for another grid.
    pub fn resized(&self, grid: (usize, usize)) -> Result<Self> {
        Self::new(self.kernel.clone(), grid)
    }

    pub fn otf_magnitude(&self) -> Array2<f64> {
        self.otf.mapv(|v| v.norm())
    }
}

/// Serializable description of a kernel, used by manifests and configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsfShape {
    /// Uniform circle of confusion.
    Disk {
        radius: f64,
    },
    Gaussian {
        sigma: f64,
    },
    /// Uniform ring, as produced by an obstructed aperture.
    Annulus {
        r_in: f64,
        r_out: f64,
    },
}

impl std::fmt::Display for PsfShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PsfShape::Disk { radius } => write!(f, "disk(r={radius})"),
            PsfShape::Gaussian { sigma } => write!(f, "gaussian(s={sigma})"),
            PsfShape::Annulus { r_in, r_out } => write!(f, "annulus({r_in}..{r_out})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_and_dc_is_one() {
        let k = Array2::from_shape_fn((5, 5), |(r, c)| (r + c) as f64);
        let psf = Psf::new(k, (16, 16)).unwrap();
        assert!((psf.kernel().sum() - 1.0).abs() < 1e-12);
        assert!((psf.otf()[[0, 0]].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_kernels() {
        assert!(Psf::new(Array2::zeros((3, 3)), (8, 8)).is_err());
        assert!(Psf::new(Array2::from_elem((3, 3), -1.0), (8, 8)).is_err());
        assert!(Psf::new(Array2::from_elem((9, 3), 1.0), (8, 8)).is_err());
    }

    #[test]
    fn shape_serializes_tagged() {
        let s = serde_json::to_string(&PsfShape::Disk { radius: 3.0 }).unwrap();
        assert_eq!(s, r#"{"shape":"disk","radius":3.0}"#);
    }
}
