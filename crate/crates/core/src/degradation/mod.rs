//! Synthetic benchmark generation: blur, biased Poisson-Gaussian noise,
//! multi-frame sequences and PSF surrogates.

pub mod manifest;
pub mod noise;
pub mod scenes;
pub mod sequence;
pub mod shapes;

pub use manifest::{LatentSource, Manifest, PsfSpec, SceneEntry, SyntheticLatent};
pub use noise::{build_noise_fields, degrade, NoiseCondition, NoiseModel, VarianceLaw, DEFAULT_INTENSITY_SCALE};
pub use scenes::{synthetic_scene, synthetic_scene_rect};
pub use sequence::{generate_sequence, generate_with_model, FrameSequence};
pub use shapes::{benchmark_psf, benchmark_psf_by_label, make_psf, perturb_psf, Perturbation};
