//! Non-learning baselines: Wiener filtering, Richardson-Lucy and a
//! nonlinear Richardson-Lucy variant.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{apply_transfer, fft2_real, ifft2_real};
use crate::image::Image;
use crate::psf::Psf;

/// Denominator guard for the inverse filter.
pub const WIENER_EPS: f64 = 1e-12;
/// Floor applied to observations before multiplicative updates.
pub const RL_FLOOR: f64 = 1e-8;
/// Consecutive loss increases that stop a nonlinear run.
pub const DIVERGENCE_PATIENCE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeconvParams {
    pub wiener_k: f64,
    pub rl_iterations: usize,
    pub nlr_iterations: usize,
    pub nlr_alpha: f64,
    pub nlr_beta: f64,
}

impl Default for DeconvParams {
    fn default() -> Self {
        Self {
            wiener_k: 1e-2,
            rl_iterations: 20,
            nlr_iterations: 25,
            nlr_alpha: 1.0,
            nlr_beta: 1.0,
        }
    }
}

impl DeconvParams {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.wiener_k >= 0.0) {
            v.push(format!("wiener_k: must be >= 0, got {}", self.wiener_k));
        }
        if self.rl_iterations == 0 {
            v.push("rl_iterations: must be >= 1".into());
        }
        if self.nlr_iterations == 0 {
            v.push("nlr_iterations: must be >= 1".into());
        }
        for (name, val) in [("nlr_alpha", self.nlr_alpha), ("nlr_beta", self.nlr_beta)] {
            if !(0.5..=2.0).contains(&val) {
                v.push(format!("{name}: must lie in [0.5, 2], got {val}"));
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassicalMethod {
    Wd,
    Lra,
    Nlr,
}

impl ClassicalMethod {
    pub const ALL: [ClassicalMethod; 3] = [ClassicalMethod::Wd, ClassicalMethod::Lra, ClassicalMethod::Nlr];

    pub fn label(&self) -> &'static str {
        match self {
            ClassicalMethod::Wd => "WD",
            ClassicalMethod::Lra => "LRA",
            ClassicalMethod::Nlr => "NLR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeconvOutput {
    pub image: Image,
    /// Wiener: a denominator hit the guard.
    pub unstable: bool,
    /// RL/NLR: negative or zero observation pixels were raised to the floor.
    pub clipped_input: bool,
    /// NLR: stopped early on a rising loss.
    pub diverged: bool,
    pub iterations: usize,
}

impl DeconvOutput {
    fn new(image: Image) -> Self {
        Self {
            image,
            unstable: false,
            clipped_input: false,
            diverged: false,
            iterations: 0,
        }
    }
}

fn check_grid(observation: &Image, psf: &Psf) -> Result<()> {
    if observation.dims() != psf.grid() {
        return Err(Error::OtfSizeMismatch {
            otf: psf.grid(),
            image: observation.dims(),
        });
    }
    Ok(())
}

/// `X̂ = conj(OTF)·Y / (|OTF|² + k)`.
pub fn wiener_deconvolve(observation: &Image, psf: &Psf, k: f64) -> Result<DeconvOutput> {
    check_grid(observation, psf)?;
    if !(k >= 0.0) {
        return Err(Error::InvalidArgument(format!("wiener k must be >= 0, got {k}")));
    }
    let mut spec = fft2_real(observation.pixels());
    let mut unstable = false;
    spec.zip_mut_with(psf.otf(), |s, h| {
        let mut den = h.norm_sqr() + k;
        if den < WIENER_EPS {
            den = WIENER_EPS;
            unstable = true;
        }
        *s = *s * h.conj() / den;
    });
    let mut out = DeconvOutput::new(Image::new(ifft2_real(&spec))?);
    out.unstable = unstable;
    out.iterations = 1;
    Ok(out)
}

fn positive_observation(observation: &Image) -> Result<(Array2<f64>, bool)> {
    if observation.max() <= 0.0 {
        return Err(Error::InvalidArgument("observation has no positive pixel".into()));
    }
    let clipped = observation.min() < RL_FLOOR;
    Ok((observation.pixels().mapv(|v| v.max(RL_FLOOR)), clipped))
}

fn ratio(y: &Array2<f64>, blurred: &Array2<f64>) -> Array2<f64> {
    let mut r = y.clone();
    r.zip_mut_with(blurred, |y, b| *y /= b.max(1e-12));
    r
}

/// `x ← x · (psfᵀ ⊗ (y / (psf ⊗ x)))` from a constant start at the mean of
/// the (floored) observation.
pub fn richardson_lucy(observation: &Image, psf: &Psf, iterations: usize) -> Result<DeconvOutput> {
    check_grid(observation, psf)?;
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let (y, clipped) = positive_observation(observation)?;
    let mut x = Array2::from_elem(y.dim(), y.mean().unwrap_or(0.0));
    for _ in 0..iterations {
        let blurred = apply_transfer(&x, psf.otf(), false);
        let corr = apply_transfer(&ratio(&y, &blurred), psf.otf(), true);
        x.zip_mut_with(&corr, |x, c| *x *= c.max(0.0));
    }
    let mut out = DeconvOutput::new(Image::new(x)?);
    out.clipped_input = clipped;
    out.iterations = iterations;
    Ok(out)
}

fn data_loss(x: &Array2<f64>, y: &Array2<f64>, otf: &Array2<Complex64>) -> f64 {
    let hx = apply_transfer(x, otf, false);
    hx.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Nonlinear Richardson-Lucy:
/// `x ← x · (psfᵀ ⊗ (y / (psf ⊗ x))^β)^α`, then rescaled to the observed
/// flux. `β` weights the amplitude ratio between observation and
/// re-blurred estimate, `α` sharpens or damps the correction. With
/// `α = β = 1` it is plain Richardson-Lucy.
///
/// For a delta PSF the update contracts toward the observation at rate
/// `|1 − αβ|`, so `αβ ≥ 2` oscillates and is caught by the divergence check.
pub fn nlr_deconvolve(
    observation: &Image,
    psf: &Psf,
    iterations: usize,
    alpha: f64,
    beta: f64,
) -> Result<DeconvOutput> {
    check_grid(observation, psf)?;
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha and beta must be positive, got {alpha}, {beta}"
        )));
    }
    let (y, clipped) = positive_observation(observation)?;
    let flux = y.sum();
    let mut x = Array2::from_elem(y.dim(), y.mean().unwrap_or(0.0));
    let mut prev = data_loss(&x, &y, psf.otf());
    let mut rising = 0;
    let mut diverged = false;
    let mut done = 0;
    for _ in 0..iterations {
        let blurred = apply_transfer(&x, psf.otf(), false);
        let mut r = ratio(&y, &blurred);
        if beta != 1.0 {
            r.mapv_inplace(|v| v.powf(beta));
        }
        let corr = apply_transfer(&r, psf.otf(), true);
        x.zip_mut_with(&corr, |x, c| {
            let c = c.max(0.0);
            *x *= if alpha == 1.0 { c } else { c.powf(alpha) };
        });
        let total = x.sum();
        if total > 0.0 {
            x.mapv_inplace(|v| v * flux / total);
        }
        done += 1;
        let loss = data_loss(&x, &y, psf.otf());
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        rising = if loss > prev { rising + 1 } else { 0 };
        prev = loss;
        if rising >= DIVERGENCE_PATIENCE {
            diverged = true;
            break;
        }
    }
    let mut out = DeconvOutput::new(Image::new(x)?);
    out.clipped_input = clipped;
    out.diverged = diverged;
    out.iterations = done;
    Ok(out)
}

pub fn run_classical(
    method: ClassicalMethod,
    observation: &Image,
    psf: &Psf,
    params: &DeconvParams,
) -> Result<DeconvOutput> {
    match method {
        ClassicalMethod::Wd => wiener_deconvolve(observation, psf, params.wiener_k),
        ClassicalMethod::Lra => richardson_lucy(observation, psf, params.rl_iterations),
        ClassicalMethod::Nlr => nlr_deconvolve(
            observation,
            psf,
            params.nlr_iterations,
            params.nlr_alpha,
            params.nlr_beta,
        ),
    }
}

/// Log-spaced Wiener regularization grid, `1e-6 .. 1`, four points per
/// decade.
pub fn wiener_k_grid() -> Vec<f64> {
    (0..=24).map(|i| 10f64.powf(-6.0 + 0.25 * i as f64)).collect()
}

/// `(alpha, beta)` pairs for tuning the nonlinear variant.
pub fn nlr_grid() -> Vec<(f64, f64)> {
    let vals = [0.6, 0.8, 1.0, 1.2, 1.5];
    vals.iter()
        .flat_map(|&a| vals.iter().map(move |&b| (a, b)))
        .filter(|(a, b)| a * b < 2.0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{build_noise_fields, degrade, make_psf, synthetic_scene, NoiseCondition};
    use crate::fourier::{convolve, correlate};
    use crate::metrics::psnr;
    use crate::psf::PsfShape;

    fn scene() -> Image {
        synthetic_scene(64, 9).unwrap()
    }

    #[test]
    fn wiener_inverts_gaussian_blur() {
        let x = scene();
        let psf = make_psf(PsfShape::Gaussian { sigma: 1.0 }, (64, 64)).unwrap();
        let y = convolve(&x, &psf).unwrap();
        let out = wiener_deconvolve(&y, &psf, 0.0).unwrap();
        assert!(psnr(&x, &out.image, 1.0).unwrap() >= 80.0);
        assert!(!out.unstable);
    }

    #[test]
    fn wiener_delta_and_limits() {
        let x = scene();
        let delta = Psf::delta((64, 64));
        let out = wiener_deconvolve(&x, &delta, 0.0).unwrap();
        assert!(out
            .image
            .pixels()
            .iter()
            .zip(x.pixels())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let psf = make_psf(PsfShape::Gaussian { sigma: 0.6 }, (64, 64)).unwrap();
        let y = convolve(&x, &psf).unwrap();
        let big = wiener_deconvolve(&y, &psf, 1e12).unwrap();
        assert!(big.image.pixels().iter().all(|v| v.abs() < 1e-9));
        // k = 1e-8 against direct division Y / OTF
        let mut direct = fft2_real(y.pixels());
        direct.zip_mut_with(psf.otf(), |s, h| *s /= h);
        let direct = ifft2_real(&direct);
        let small = wiener_deconvolve(&y, &psf, 1e-8).unwrap();
        let num: f64 = small
            .image
            .pixels()
            .iter()
            .zip(&direct)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let den: f64 = direct.iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() < 1e-4);
    }

    #[test]
    fn wiener_flags_unguarded_zero() {
        let psf = Psf::new(Array2::from_elem((3, 3), 1.0), (48, 48)).unwrap();
        let y = convolve(&synthetic_scene(48, 1).unwrap(), &psf).unwrap();
        assert!(wiener_deconvolve(&y, &psf, 0.0).unwrap().unstable);
        assert!(!wiener_deconvolve(&y, &psf, 1e-3).unwrap().unstable);
    }

    #[test]
    fn wiener_tuned_beats_observation() {
        let x = scene();
        let psf = make_psf(PsfShape::Disk { radius: 3.0 }, (64, 64)).unwrap();
        let model = build_noise_fields(64, 64, NoiseCondition::C1).unwrap();
        let y = degrade(&x, &psf, &model, 3).unwrap();
        let best = wiener_k_grid()
            .into_iter()
            .map(|k| psnr(&x, &wiener_deconvolve(&y, &psf, k).unwrap().image, 1.0).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best > psnr(&x, &y, 1.0).unwrap());
    }

    #[test]
    fn rl_fixed_points() {
        let x = scene();
        let out = richardson_lucy(&x, &Psf::delta((64, 64)), 7).unwrap();
        assert!(out
            .image
            .pixels()
            .iter()
            .zip(x.pixels())
            .all(|(a, b)| (a - b).abs() < 1e-10));
        let c = Image::filled(32, 32, 0.4).unwrap();
        let psf = make_psf(PsfShape::Disk { radius: 3.0 }, (32, 32)).unwrap();
        let out = richardson_lucy(&c, &psf, 5).unwrap();
        assert!(out.image.pixels().iter().all(|v| (v - 0.4).abs() < 1e-10));
    }

    /// Textbook update written out with explicit convolve/correlate calls.
    fn rl_literal(y: &Image, psf: &Psf, iterations: usize) -> Image {
        let mut x = Image::filled(y.height(), y.width(), y.mean()).unwrap();
        for _ in 0..iterations {
            let hx = convolve(&x, psf).unwrap();
            let r = y.zip_map(&hx, |a, b| a / b).unwrap();
            let c = correlate(&r, psf).unwrap();
            x = x.zip_map(&c, |a, b| a * b).unwrap();
        }
        x
    }

    #[test]
    fn rl_improves_and_matches_literal() {
        let x = scene();
        let psf = make_psf(PsfShape::Disk { radius: 3.0 }, (64, 64)).unwrap();
        let y = convolve(&x, &psf).unwrap();
        let out = richardson_lucy(&y, &psf, 20).unwrap();
        assert!(psnr(&x, &out.image, 1.0).unwrap() > psnr(&x, &y, 1.0).unwrap());
        let lit = rl_literal(&y, &psf, 20);
        assert!(out
            .image
            .pixels()
            .iter()
            .zip(lit.pixels())
            .all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn rl_flux_and_positivity() {
        let x = scene();
        let psf = make_psf(PsfShape::Disk { radius: 4.0 }, (64, 64)).unwrap();
        let model = build_noise_fields(64, 64, NoiseCondition::C3).unwrap();
        let y = degrade(&x, &psf, &model, 1).unwrap();
        let flux = y.pixels().mapv(|v| v.max(RL_FLOOR)).sum();
        for it in [1, 5, 15] {
            let out = richardson_lucy(&y, &psf, it).unwrap();
            assert!(((out.image.pixels().sum() - flux) / flux).abs() < 1e-4);
            assert!(out.image.min() >= 0.0);
        }
    }

    #[test]
    fn rl_clips_and_rejects() {
        let psf = Psf::delta((16, 16));
        let y = Image::from_fn(16, 16, |(r, _)| r as f64 / 8.0 - 0.5).unwrap();
        assert!(richardson_lucy(&y, &psf, 2).unwrap().clipped_input);
        assert!(richardson_lucy(&Image::zeros(16, 16).unwrap(), &psf, 2).is_err());
    }

    #[test]
    fn nlr_neutral_is_rl() {
        let x = scene();
        let psf = make_psf(PsfShape::Disk { radius: 3.0 }, (64, 64)).unwrap();
        let y = convolve(&x, &psf).unwrap();
        let a = nlr_deconvolve(&y, &psf, 20, 1.0, 1.0).unwrap();
        let b = richardson_lucy(&y, &psf, 20).unwrap();
        assert!(a
            .image
            .pixels()
            .iter()
            .zip(b.image.pixels())
            .all(|(p, q)| (p - q).abs() < 1e-8));
    }

    #[test]
    fn nlr_delta_converges_to_observation() {
        let x = scene();
        let delta = Psf::delta((64, 64));
        for (a, b) in [(1.0, 1.0), (0.5, 1.0), (1.0, 1.5), (0.8, 0.8), (2.0, 0.5)] {
            let out = nlr_deconvolve(&x, &delta, 60, a, b).unwrap();
            let err = out
                .image
                .pixels()
                .iter()
                .zip(x.pixels())
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(err < 1e-6, "({a}, {b}) err {err}");
        }
    }
}
