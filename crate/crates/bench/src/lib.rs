//! Shared inputs for the benchmarks.

use pn2n_core::degradation::{benchmark_psf, generate_sequence, make_psf, synthetic_scene, NoiseCondition};
use pn2n_core::{Image, Psf};

/// A synthetic scene, the severe benchmark PSF on its grid, and one C3 frame.
pub fn fixture(size: usize) -> (Image, Psf, Image) {
    let latent = synthetic_scene(size, 0).expect("valid size");
    let psf = make_psf(benchmark_psf(4).expect("level 4 exists"), (size, size)).expect("psf fits");
    let seq = generate_sequence(&latent, &psf, NoiseCondition::C3, 2, 0).expect("simulation");
    let frame = seq.frames[0].clone();
    (latent, psf, frame)
}
