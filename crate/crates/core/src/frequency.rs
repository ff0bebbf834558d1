//! Spectral feasibility of an observation under a PSF.
//!
//! Anything an observation carries at a frequency the OTF cannot reach is
//! outside the range of the blur operator, so no latent image reproduces
//! it and a data-fidelity loss cannot go below that energy.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{fft2_real, ifft2_real, signed_frequency};
use crate::image::Image;
use crate::psf::Psf;

/// Default zero tolerance, relative to the DC magnitude of 1.
pub const DEFAULT_ZERO_TOL: f64 = 1e-3;
/// Number of radial bands in the decay profile.
pub const RADIAL_BINS: usize = 16;
/// A decaying OTF ends below this fraction of DC in its outermost band.
pub const DECAY_FRACTION: f64 = 0.1;
/// Magnitudes below this are indistinguishable from FFT rounding noise.
const RESOLVABLE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OtfCondition {
    HasZero,
    DecayingNoZero,
    NeitherApplies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtfClassification {
    pub condition: OtfCondition,
    /// Signed `(row, col)` frequency indices of OTF zeros.
    pub zero_frequencies: Vec<(isize, isize)>,
    /// `(radius in cycles/pixel, mean |OTF|)`, radii increasing.
    pub decay_profile: Vec<(f64, f64)>,
    pub min_magnitude: f64,
}

fn check_tol(zero_tol: f64) -> Result<()> {
    if !(zero_tol > 0.0 && zero_tol < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "zero_tol must lie in (0, 1), got {zero_tol}"
        )));
    }
    Ok(())
}

/// `|OTF|` reordered so the zero frequency sits at `(h/2, w/2)`.
fn centered_magnitude(psf: &Psf) -> Array2<f64> {
    let mag = psf.otf_magnitude();
    let (h, w) = mag.dim();
    Array2::from_shape_fn((h, w), |(r, c)| mag[[(r + h - h / 2) % h, (c + w - w / 2) % w]])
}

/// Frequencies where `|OTF| < zero_tol` and `|OTF|` is a strict local
/// minimum along the row or column axis of the centered (non-wrapping)
/// frequency grid, with both neighbors above rounding noise.
///
/// The local-minimum requirement separates genuine zero crossings (ring
/// zeros of a disk) from a transfer function that merely decays below the
/// tolerance toward the band edge (a wide Gaussian).
pub fn zero_frequencies(psf: &Psf, zero_tol: f64) -> Result<Vec<(isize, isize)>> {
    check_tol(zero_tol)?;
    let m = centered_magnitude(psf);
    let (h, w) = m.dim();
    let mut zeros = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = m[[r, c]];
            if v >= zero_tol {
                continue;
            }
            let dip = |a: f64, b: f64| v < a && v < b && a.min(b) > RESOLVABLE;
            let row_min = r > 0 && r + 1 < h && dip(m[[r - 1, c]], m[[r + 1, c]]);
            let col_min = c > 0 && c + 1 < w && dip(m[[r, c - 1]], m[[r, c + 1]]);
            if row_min || col_min {
                zeros.push((r as isize - (h / 2) as isize, c as isize - (w / 2) as isize));
            }
        }
    }
    Ok(zeros)
}

/// Radially averaged `|OTF|` over `[0, 0.5]` cycles/pixel. Empty bands are
/// skipped.
pub fn radial_profile(psf: &Psf, bins: usize) -> Vec<(f64, f64)> {
    let mag = psf.otf_magnitude();
    let (h, w) = mag.dim();
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for ((r, c), &v) in mag.indexed_iter() {
        let fy = signed_frequency(r, h) as f64 / h as f64;
        let fx = signed_frequency(c, w) as f64 / w as f64;
        let rad = (fx * fx + fy * fy).sqrt();
        if rad > 0.5 {
            continue;
        }
        let b = ((rad / 0.5) * bins as f64).min(bins as f64 - 1.0) as usize;
        sums[b] += v;
        counts[b] += 1;
    }
    (0..bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| ((b as f64 + 0.5) * 0.5 / bins as f64, sums[b] / counts[b] as f64))
        .collect()
}

pub fn classify_psf(psf: &Psf, zero_tol: f64) -> Result<OtfClassification> {
    let zero_frequencies = zero_frequencies(psf, zero_tol)?;
    let decay_profile = radial_profile(psf, RADIAL_BINS);
    let min_magnitude = psf.otf_magnitude().fold(f64::INFINITY, |m, &v| m.min(v));
    let dc = psf.otf()[[0, 0]].norm();
    let outer = decay_profile.last().map_or(dc, |p| p.1);
    let condition = if !zero_frequencies.is_empty() {
        OtfCondition::HasZero
    } else if outer < DECAY_FRACTION * dc {
        OtfCondition::DecayingNoZero
    } else {
        OtfCondition::NeitherApplies
    };
    Ok(OtfClassification {
        condition,
        zero_frequencies,
        decay_profile,
        min_magnitude,
    })
}

/// Largest gain `1 / |OTF|` of the unregularized inverse filter.
pub fn pseudo_inverse_amplification(psf: &Psf) -> f64 {
    let min = psf.otf_magnitude().fold(f64::INFINITY, |m, &v| m.min(v));
    1.0 / min.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualFloor {
    /// Minimum of `‖psf ⊗ x − y‖²` (sum of squares) over all `x`.
    pub floor_value: f64,
    /// Per-frequency contribution, unshifted DFT layout.
    pub infeasible_energy_map: Array2<f64>,
}

fn unreachable_mask(psf: &Psf, zero_tol: f64) -> Array2<bool> {
    psf.otf_magnitude().mapv(|m| m < zero_tol)
}

/// Energy of `observation` at frequencies where `|OTF| < zero_tol`, with
/// Parseval normalization so it is in pixel-domain squared-error units.
pub fn residual_floor(observation: &Image, psf: &Psf, zero_tol: f64) -> Result<ResidualFloor> {
    check_tol(zero_tol)?;
    if observation.dims() != psf.grid() {
        return Err(Error::OtfSizeMismatch {
            otf: psf.grid(),
            image: observation.dims(),
        });
    }
    let n = observation.len() as f64;
    let spec = fft2_real(observation.pixels());
    let mask = unreachable_mask(psf, zero_tol);
    let mut map = Array2::zeros(spec.dim());
    ndarray::Zip::from(&mut map).and(&spec).and(&mask).for_each(|e, s, &m| {
        if m {
            *e = s.norm_sqr() / n;
        }
    });
    Ok(ResidualFloor {
        floor_value: map.sum(),
        infeasible_energy_map: map,
    })
}

/// One loss curve; `diverged` marks a curve that stopped on a non-finite or
/// growing loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
    pub diverged: bool,
}

impl LossCurve {
    pub fn terminal(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagnationCurves {
    /// Plain descent on the biased observation.
    pub biased: LossCurve,
    /// Joint descent on the latent and a bias estimate.
    pub corrected: LossCurve,
    pub floor: f64,
}

fn spectral_sum_sq(spec: &Array2<Complex64>) -> f64 {
    spec.iter().map(|v| v.norm_sqr()).sum::<f64>() / spec.len() as f64
}

/// Fixed-step gradient descent on `‖psf ⊗ x − y‖²` from `x = y`, step
/// `1 / max|OTF|²`. Runs in the Fourier domain, where it is exact.
/// Returns the loss before each step and after the last.
pub fn least_squares_descent(observation: &Image, psf: &Psf, steps: usize) -> Result<LossCurve> {
    let none = Array2::from_elem(psf.grid(), false);
    Ok(joint_descent(observation, psf, steps, &none)?.0)
}

/// Descent on `‖psf ⊗ x − (y − b)‖²` where `b` is restricted to the
/// frequencies in `bias_support`. Returns the curve and the final `b`.
fn joint_descent(
    observation: &Image,
    psf: &Psf,
    steps: usize,
    bias_support: &Array2<bool>,
) -> Result<(LossCurve, Array2<f64>)> {
    if observation.dims() != psf.grid() {
        return Err(Error::OtfSizeMismatch {
            otf: psf.grid(),
            image: observation.dims(),
        });
    }
    let otf = psf.otf();
    let max_gain = otf.iter().fold(0.0f64, |m, v| m.max(v.norm_sqr()));
    let eta = 1.0 / max_gain;
    let y = fft2_real(observation.pixels());
    let mut x = y.clone();
    let mut b = Array2::<Complex64>::zeros(y.dim());
    let residual = |x: &Array2<Complex64>, b: &Array2<Complex64>| {
        let mut r = Array2::zeros(y.dim());
        ndarray::Zip::from(&mut r)
            .and(x)
            .and(b)
            .and(&y)
            .and(otf)
            .for_each(|r, &x, &b, &y, &h| *r = h * x - y + b);
        r
    };
    let mut points = Vec::with_capacity(steps + 1);
    let mut diverged = false;
    let mut rising = 0;
    for step in 0..=steps {
        let r = residual(&x, &b);
        let loss = spectral_sum_sq(&r);
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        if let Some(&(_, prev)) = points.last() {
            rising = if loss > prev * (1.0 + 1e-12) { rising + 1 } else { 0 };
            if rising >= 5 {
                diverged = true;
            }
        }
        points.push((step, loss));
        if step == steps || diverged {
            break;
        }
        ndarray::Zip::from(&mut x)
            .and(&mut b)
            .and(&r)
            .and(otf)
            .and(bias_support)
            .for_each(|x, b, &r, &h, &s| {
                *x -= eta * h.conj() * r;
                if s {
                    *b -= eta * r;
                }
            });
    }
    Ok((LossCurve { points, diverged }, ifft2_real(&b)))
}

/// Descent on `y′ = psf ⊗ latent + bias` with and without a jointly
/// estimated bias. The bias estimate lives on the unreachable frequencies,
/// the only part of a bias that the latent cannot absorb.
pub fn stagnation_experiment(
    latent: &Image,
    psf: &Psf,
    bias_field: &Image,
    steps: usize,
    zero_tol: f64,
) -> Result<StagnationCurves> {
    check_tol(zero_tol)?;
    latent.ensure_same_dims(bias_field)?;
    let observed = crate::fourier::convolve(latent, psf)?.add(bias_field)?;
    let floor = residual_floor(&observed, psf, zero_tol)?.floor_value;
    let biased = least_squares_descent(&observed, psf, steps)?;
    let (corrected, _) = joint_descent(&observed, psf, steps, &unreachable_mask(psf, zero_tol))?;
    Ok(StagnationCurves {
        biased,
        corrected,
        floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{make_psf, synthetic_scene};
    use crate::fourier::convolve;
    use crate::psf::PsfShape;

    fn disk(r: f64, n: usize) -> Psf {
        make_psf(PsfShape::Disk { radius: r }, (n, n)).unwrap()
    }

    #[test]
    fn classifications() {
        let square = Psf::new(Array2::from_elem((15, 15), 1.0), (64, 64)).unwrap();
        assert_eq!(
            classify_psf(&square, DEFAULT_ZERO_TOL).unwrap().condition,
            OtfCondition::HasZero
        );
        let disk5 = classify_psf(&disk(5.0, 64), DEFAULT_ZERO_TOL).unwrap();
        assert_eq!(disk5.condition, OtfCondition::HasZero);
        assert!(!disk5.zero_frequencies.is_empty());
        let g = make_psf(PsfShape::Gaussian { sigma: 2.0 }, (64, 64)).unwrap();
        let gc = classify_psf(&g, DEFAULT_ZERO_TOL).unwrap();
        assert_eq!(gc.condition, OtfCondition::DecayingNoZero);
        assert!(gc.zero_frequencies.is_empty());
        let d = classify_psf(&Psf::delta((64, 64)), DEFAULT_ZERO_TOL).unwrap();
        assert_eq!(d.condition, OtfCondition::NeitherApplies);
        assert!(d.decay_profile.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn tolerance_validated() {
        let p = Psf::delta((16, 16));
        assert!(classify_psf(&p, 0.0).is_err());
        assert!(classify_psf(&p, 1.0).is_err());
    }

    #[test]
    fn in_range_observation_has_no_floor() {
        let x = synthetic_scene(64, 1).unwrap();
        let xs = fft2_real(x.pixels());
        for r in [3.0, 5.0] {
            let psf = disk(r, 64);
            let y = convolve(&x, &psf).unwrap();
            // On the masked frequencies |Y| = |OTF||X| < tol·|X|.
            let mask = unreachable_mask(&psf, DEFAULT_ZERO_TOL);
            let bound: f64 = xs
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.norm_sqr())
                .sum::<f64>()
                * DEFAULT_ZERO_TOL.powi(2)
                / x.len() as f64;
            let f = residual_floor(&y, &psf, DEFAULT_ZERO_TOL).unwrap().floor_value;
            assert!(f <= bound, "{f} > {bound}");
            let fc = residual_floor(&y.offset(0.05).unwrap(), &psf, DEFAULT_ZERO_TOL)
                .unwrap()
                .floor_value;
            assert!((fc - f).abs() < 1e-12);
        }
        // Exact zeros: the floor vanishes to rounding.
        let psf = disk(1.5, 48);
        let y = convolve(&synthetic_scene(48, 1).unwrap(), &psf).unwrap();
        assert!(residual_floor(&y, &psf, DEFAULT_ZERO_TOL).unwrap().floor_value < 1e-8);
    }

    #[test]
    fn floor_is_sum_of_map_and_quadratic() {
        let psf = disk(1.5, 48);
        let x = synthetic_scene(48, 2).unwrap();
        let y = convolve(&x, &psf).unwrap();
        let bump = Image::from_fn(48, 48, |(r, c)| 0.01 * ((r * c) % 5) as f64).unwrap();
        let f1 = residual_floor(&y.add(&bump).unwrap(), &psf, DEFAULT_ZERO_TOL).unwrap();
        assert!((f1.floor_value - f1.infeasible_energy_map.sum()).abs() < 1e-12);
        assert!(f1.floor_value > 0.0);
        let f3 = residual_floor(&y.add(&bump.scale(3.0).unwrap()).unwrap(), &psf, DEFAULT_ZERO_TOL).unwrap();
        // Disk(1.5) on a grid divisible by 3 has exact zeros, so only the bump
        // contributes.
        assert!((f3.floor_value / f1.floor_value - 9.0).abs() < 9e-4);
    }

    #[test]
    fn zero_bias_curves_coincide() {
        let x = synthetic_scene(64, 3).unwrap();
        let zero = Image::zeros(64, 64).unwrap();
        let s = stagnation_experiment(&x, &disk(5.0, 64), &zero, 200, DEFAULT_ZERO_TOL).unwrap();
        for (a, b) in s.biased.points.iter().zip(&s.corrected.points) {
            assert!((a.1 - b.1).abs() < 1e-6, "{a:?} {b:?}");
        }
    }

    #[test]
    fn delta_psf_absorbs_bias() {
        let x = synthetic_scene(32, 4).unwrap();
        let bias = Image::from_fn(32, 32, |(r, c)| 0.01 + 0.001 * (r + c) as f64).unwrap();
        let s = stagnation_experiment(&x, &Psf::delta((32, 32)), &bias, 10, DEFAULT_ZERO_TOL).unwrap();
        assert!(s.biased.terminal() < 1e-20);
        assert!(!s.biased.diverged);
    }

    #[test]
    fn amplification_grows_with_sampling() {
        // Same physical blur sampled four times more finely.
        let coarse = make_psf(PsfShape::Gaussian { sigma: 0.5 }, (32, 32)).unwrap();
        let fine = make_psf(PsfShape::Gaussian { sigma: 2.0 }, (128, 128)).unwrap();
        assert!(pseudo_inverse_amplification(&fine) >= 4.0 * pseudo_inverse_amplification(&coarse));
    }
}
