use ndarray::Array2;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::convolve;
use crate::image::Image;
use crate::psf::Psf;
use crate::rng::SeedTree;

/// Default bridge from 8-bit count units to `[0, 1]` intensity.
pub const DEFAULT_INTENSITY_SCALE: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum VarianceLaw {
    Fixed {
        variance: f64,
    },
    /// One `σ² ~ U(lo, hi)` draw per frame.
    UniformPerFrame {
        lo: f64,
        hi: f64,
    },
}

impl VarianceLaw {
    fn draw(&self, rng: &mut impl rand::Rng) -> f64 {
        match *self {
            VarianceLaw::Fixed { variance } => variance,
            VarianceLaw::UniformPerFrame { lo, hi } => rng.random_range(lo..hi),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            VarianceLaw::Fixed { variance } => variance,
            VarianceLaw::UniformPerFrame { lo, hi } => 0.5 * (lo + hi),
        }
    }
}

/// Per-pixel Poisson + Gaussian noise, `n ~ P(μ_p) + N(μ_n, σ²)`, in count
/// units. Multiply by `intensity_scale` to get `[0, 1]` intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    poisson_mean: Array2<f64>,
    gaussian_mean: Array2<f64>,
    variance: VarianceLaw,
    intensity_scale: f64,
}

impl NoiseModel {
    pub fn new(
        poisson_mean: Array2<f64>,
        gaussian_mean: Array2<f64>,
        variance: VarianceLaw,
        intensity_scale: f64,
    ) -> Result<Self> {
        if poisson_mean.dim() != gaussian_mean.dim() {
            return Err(Error::DimensionMismatch {
                expected: poisson_mean.dim(),
                actual: gaussian_mean.dim(),
            });
        }
        if poisson_mean.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("Poisson mean must be finite and >= 0".into()));
        }
        if gaussian_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("Gaussian mean must be finite".into()));
        }
        match variance {
            VarianceLaw::Fixed { variance } if !(variance >= 0.0) => {
                return Err(Error::InvalidArgument(format!("variance {variance} < 0")))
            }
            VarianceLaw::UniformPerFrame { lo, hi } if !(lo < hi && lo >= 0.0) => {
                return Err(Error::InvalidArgument(format!("need 0 <= lo < hi, got {lo}, {hi}")))
            }
            _ => {}
        }
        if !(intensity_scale > 0.0) {
            return Err(Error::InvalidArgument("intensity_scale must be > 0".into()));
        }
        Ok(Self {
            poisson_mean,
            gaussian_mean,
            variance,
            intensity_scale,
        })
    }

    /// No noise at all.
    pub fn noiseless(height: usize, width: usize) -> Self {
        Self {
            poisson_mean: Array2::zeros((height, width)),
            gaussian_mean: Array2::zeros((height, width)),
            variance: VarianceLaw::Fixed { variance: 0.0 },
            intensity_scale: DEFAULT_INTENSITY_SCALE,
        }
    }

    pub fn poisson_mean(&self) -> &Array2<f64> {
        &self.poisson_mean
    }

    pub fn gaussian_mean(&self) -> &Array2<f64> {
        &self.gaussian_mean
    }

    pub fn variance(&self) -> VarianceLaw {
        self.variance
    }

    pub fn intensity_scale(&self) -> f64 {
        self.intensity_scale
    }

    pub fn dims(&self) -> (usize, usize) {
        self.poisson_mean.dim()
    }

    pub fn with_intensity_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument("intensity_scale must be > 0".into()));
        }
        self.intensity_scale = scale;
        Ok(self)
    }

    /// Expected noise in intensity units, `scale · (μ_p + μ_n)`.
    pub fn bias_field(&self) -> Result<Image> {
        let s = self.intensity_scale;
        let mut field = &self.poisson_mean + &self.gaussian_mean;
        field.mapv_inplace(|v| v * s);
        Image::new(field)
    }

    /// Per-pixel noise variance in intensity units, averaged over the
    /// variance law.
    pub fn expected_variance(&self) -> Array2<f64> {
        let s2 = self.intensity_scale * self.intensity_scale;
        let g = self.variance.mean();
        self.poisson_mean.mapv(|p| s2 * (p + g))
    }

    /// One noise realization in intensity units.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Array2<f64> {
        let sigma = self.variance.draw(rng).sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let s = self.intensity_scale;
        let mut out = Array2::zeros(self.dims());
        for (o, (&lp, &mn)) in out
            .iter_mut()
            .zip(self.poisson_mean.iter().zip(self.gaussian_mean.iter()))
        {
            let p = if lp > 0.0 {
                Poisson::new(lp).expect("positive rate").sample(rng)
            } else {
                0.0
            };
            let g = if sigma > 0.0 {
                mn + sigma * normal.sample(rng)
            } else {
                mn
            };
            *o = s * (p + g);
        }
        out
    }
}

/// The standard noise settings, plus a spatially constant custom one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum NoiseCondition {
    /// `N(0, σ² = 100)`.
    C1,
    /// `P(15)`.
    C2,
    /// `P(μ_p) + N(μ_n, σ²)`, `σ² ~ U(20, 50)`, with the quadratic field on
    /// the Poisson term.
    C3,
    /// As C3 with the two mean fields swapped.
    C4,
    Custom {
        poisson_mean: f64,
        gaussian_mean: f64,
        variance: VarianceLaw,
    },
}

impl NoiseCondition {
    pub fn noiseless() -> Self {
        NoiseCondition::Custom {
            poisson_mean: 0.0,
            gaussian_mean: 0.0,
            variance: VarianceLaw::Fixed { variance: 0.0 },
        }
    }

    pub fn label(&self) -> String {
        match self {
            NoiseCondition::C1 => "C1".into(),
            NoiseCondition::C2 => "C2".into(),
            NoiseCondition::C3 => "C3".into(),
            NoiseCondition::C4 => "C4".into(),
            NoiseCondition::Custom {
                poisson_mean,
                gaussian_mean,
                variance,
            } => format!("custom(p={poisson_mean},g={gaussian_mean},v={})", variance.mean()),
        }
    }
}

/// `μ_p = 0.001·(x/4)² + 0.02·y + 2` with `x` the column and `y` the row.
pub fn quadratic_mean(col: usize, row: usize) -> f64 {
    let x = col as f64;
    let y = row as f64;
    0.001 * (x / 4.0).powi(2) + 0.02 * y + 2.0
}

/// `μ_n = 0.01·x + 0.01·y + 2`.
pub fn linear_mean(col: usize, row: usize) -> f64 {
    0.01 * col as f64 + 0.01 * row as f64 + 2.0
}

pub fn build_noise_fields(width: usize, height: usize, condition: NoiseCondition) -> Result<NoiseModel> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("noise fields need positive dimensions".into()));
    }
    let dims = (height, width);
    let quad = || Array2::from_shape_fn(dims, |(r, c)| quadratic_mean(c, r));
    let lin = || Array2::from_shape_fn(dims, |(r, c)| linear_mean(c, r));
    let mixed = VarianceLaw::UniformPerFrame { lo: 20.0, hi: 50.0 };
    let (poisson, gaussian, variance) = match condition {
        NoiseCondition::C1 => (
            Array2::zeros(dims),
            Array2::zeros(dims),
            VarianceLaw::Fixed { variance: 100.0 },
        ),
        NoiseCondition::C2 => (
            Array2::from_elem(dims, 15.0),
            Array2::zeros(dims),
            VarianceLaw::Fixed { variance: 0.0 },
        ),
        NoiseCondition::C3 => (quad(), lin(), mixed),
        NoiseCondition::C4 => (lin(), quad(), mixed),
        NoiseCondition::Custom {
            poisson_mean,
            gaussian_mean,
            variance,
        } => (
            Array2::from_elem(dims, poisson_mean),
            Array2::from_elem(dims, gaussian_mean),
            variance,
        ),
    };
    NoiseModel::new(poisson, gaussian, variance, DEFAULT_INTENSITY_SCALE)
}

/// `psf ⊗ latent + scale·(P(μ_p) + N(μ_n, σ²))`, deterministic in `seed`.
/// The result is not clipped.
pub fn degrade(latent: &Image, psf: &Psf, model: &NoiseModel, seed: u64) -> Result<Image> {
    if model.dims() != latent.dims() {
        return Err(Error::DimensionMismatch {
            expected: latent.dims(),
            actual: model.dims(),
        });
    }
    let blurred = convolve(latent, psf)?;
    let mut rng = SeedTree::new(seed).rng();
    let noise = model.sample(&mut rng);
    Image::new(blurred.into_pixels() + noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c3_field_values() {
        let m = build_noise_fields(128, 128, NoiseCondition::C3).unwrap();
        assert!((m.poisson_mean()[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((m.gaussian_mean()[[0, 0]] - 2.0).abs() < 1e-12);
        // x = 40 (column), y = 100 (row)
        assert!((m.poisson_mean()[[100, 40]] - 4.1).abs() < 1e-12);
        assert!((m.gaussian_mean()[[100, 40]] - 3.4).abs() < 1e-12);
    }

    #[test]
    fn c4_swaps_roles() {
        let c3 = build_noise_fields(64, 32, NoiseCondition::C3).unwrap();
        let c4 = build_noise_fields(64, 32, NoiseCondition::C4).unwrap();
        assert_eq!(c3.poisson_mean(), c4.gaussian_mean());
        assert_eq!(c3.gaussian_mean(), c4.poisson_mean());
        assert_eq!(c4.dims(), (32, 64));
    }

    #[test]
    fn c1_and_c2() {
        let c1 = build_noise_fields(16, 16, NoiseCondition::C1).unwrap();
        assert!(c1.poisson_mean().iter().all(|&v| v == 0.0));
        assert!(c1.gaussian_mean().iter().all(|&v| v == 0.0));
        assert_eq!(c1.variance(), VarianceLaw::Fixed { variance: 100.0 });
        let c2 = build_noise_fields(16, 16, NoiseCondition::C2).unwrap();
        assert!(c2.poisson_mean().iter().all(|&v| v == 15.0));
    }

    #[test]
    fn zero_model_returns_blur() {
        let latent = Image::from_fn(16, 16, |(r, c)| ((r * 3 + c) % 7) as f64 / 7.0).unwrap();
        let psf = Psf::new(Array2::from_elem((3, 3), 1.0), (16, 16)).unwrap();
        let model = NoiseModel::noiseless(16, 16);
        let y = degrade(&latent, &psf, &model, 5).unwrap();
        assert_eq!(y, convolve(&latent, &psf).unwrap());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let latent = Image::filled(16, 16, 0.5).unwrap();
        let psf = Psf::delta((16, 16));
        let model = build_noise_fields(16, 16, NoiseCondition::C3).unwrap();
        let a = degrade(&latent, &psf, &model, 9).unwrap();
        let b = degrade(&latent, &psf, &model, 9).unwrap();
        let c = degrade(&latent, &psf, &model, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn c1_sample_moments() {
        let latent = Image::filled(100, 100, 0.5).unwrap();
        let psf = Psf::delta((100, 100));
        let model = build_noise_fields(100, 100, NoiseCondition::C1).unwrap();
        let y = degrade(&latent, &psf, &model, 1).unwrap();
        let n = y.len() as f64;
        let resid: Vec<f64> = y.pixels().iter().map(|v| v - 0.5).collect();
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sigma = 10.0 / 255.0;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "{mean}");
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn invalid_models_rejected() {
        let z = Array2::zeros((8, 8));
        assert!(NoiseModel::new(
            z.mapv(|_: f64| -1.0),
            z.clone(),
            VarianceLaw::Fixed { variance: 1.0 },
            1.0
        )
        .is_err());
        assert!(NoiseModel::new(
            z.clone(),
            z.clone(),
            VarianceLaw::UniformPerFrame { lo: 5.0, hi: 5.0 },
            1.0
        )
        .is_err());
        assert!(NoiseModel::new(z.clone(), z, VarianceLaw::Fixed { variance: 1.0 }, 0.0).is_err());
    }
}
