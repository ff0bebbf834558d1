use crate::error::{Error, Result};
use crate::fourier::convolve;
use crate::image::Image;
use crate::psf::Psf;
use crate::rng::frame_seed;

use super::noise::{build_noise_fields, degrade, NoiseCondition, NoiseModel};

/// Noisy observations of one blurred scene. All frames share the same mean
/// fields; each frame has its own variance draw and noise samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub latent_blurred: Image,
    pub true_bias_field: Image,
    pub seeds: Vec<u64>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.latent_blurred.dims()
    }

    /// Per-pixel mean of all frames.
    pub fn frame_mean(&self) -> Result<Image> {
        Image::average(&self.frames)
    }
}

pub fn generate_sequence(
    latent: &Image,
    psf: &Psf,
    condition: NoiseCondition,
    n_frames: usize,
    seed: u64,
) -> Result<FrameSequence> {
    let (h, w) = latent.dims();
    let model = build_noise_fields(w, h, condition)?;
    generate_with_model(latent, psf, &model, n_frames, seed)
}

pub fn generate_with_model(
    latent: &Image,
    psf: &Psf,
    model: &NoiseModel,
    n_frames: usize,
    seed: u64,
) -> Result<FrameSequence> {
    if n_frames < 2 || n_frames % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "frame count must be even and >= 2, got {n_frames}"
        )));
    }
    let seeds: Vec<u64> = (0..n_frames).map(|i| frame_seed(seed, i)).collect();
    let frames = seeds
        .iter()
        .map(|&s| degrade(latent, psf, model, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence {
        frames,
        latent_blurred: convolve(latent, psf)?,
        true_bias_field: model.bias_field()?,
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::noise::quadratic_mean;

    fn scene() -> Image {
        Image::from_fn(16, 16, |(r, c)| 0.2 + 0.6 * (((r / 4) + (c / 4)) % 2) as f64).unwrap()
    }

    #[test]
    fn zero_noise_frames_equal_blur() {
        let psf = Psf::new(ndarray::Array2::from_elem((3, 3), 1.0), (16, 16)).unwrap();
        let seq = generate_sequence(&scene(), &psf, NoiseCondition::noiseless(), 2, 3).unwrap();
        assert_eq!(seq.frames[0], seq.latent_blurred);
        assert_eq!(seq.frames[1], seq.latent_blurred);
    }

    #[test]
    fn odd_count_rejected() {
        let psf = Psf::delta((16, 16));
        assert!(generate_sequence(&scene(), &psf, NoiseCondition::C1, 3, 0).is_err());
        assert!(generate_sequence(&scene(), &psf, NoiseCondition::C1, 0, 0).is_err());
    }

    #[test]
    fn same_seed_identical() {
        let psf = Psf::delta((16, 16));
        let a = generate_sequence(&scene(), &psf, NoiseCondition::C3, 4, 11).unwrap();
        let b = generate_sequence(&scene(), &psf, NoiseCondition::C3, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames[0], a.frames[1]);
    }

    #[test]
    fn bias_field_matches_model() {
        let psf = Psf::delta((16, 16));
        let seq = generate_sequence(&scene(), &psf, NoiseCondition::C3, 2, 1).unwrap();
        let expected = (quadratic_mean(5, 7) + 0.01 * 5.0 + 0.01 * 7.0 + 2.0) / 255.0;
        assert!((seq.true_bias_field.get(7, 5) - expected).abs() < 1e-12);
    }
}
