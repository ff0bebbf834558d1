//! Self-supervised defocus deblurring under biased noise.
//!
//! The pipeline denoises a multi-frame sequence with a network trained on
//! frame pairs, then deblurs the result with a second network trained
//! against the known PSF while jointly learning the noise bias field.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deblur;
pub mod deconv;
pub mod degradation;
pub mod denoiser;
pub mod error;
pub mod fourier;
pub mod frequency;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod psf;
pub mod rng;

pub use error::{Error, Result};
pub use image::Image;
pub use metrics::QualityReport;
pub use psf::{Psf, PsfShape};
