//! The two-step pipeline and its ablations.
//!
//! | code | denoiser | bias | deblur network | deblur input |
//! |------|----------|------|----------------|--------------|
//! | T1   | yes      | -    | -              | -            |
//! | T2   | -        | yes  | yes            | raw frames   |
//! | T3   | yes      | -    | yes            | denoised     |
//! | T4   | yes      | yes  | yes            | denoised     |
//!
//! Each scene's denoised observation `y′` is the mean of its denoised
//! frames. All scenes share one bias field.

use serde::{Deserialize, Serialize};

use crate::deblur::{reconstruct, train_deblur, BiasField, DeblurTrainConfig, TrainedDeblur};
use crate::degradation::FrameSequence;
use crate::denoiser::{
    denoise_all, make_pairs, train_denoiser, FramePairSet, PairRule, Sn2nTrainConfig, TrainedDenoiser,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::QualityReport;
use crate::nn::UNetSpec;
use crate::psf::Psf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    T1,
    T2,
    T3,
    T4,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::T1, Ablation::T2, Ablation::T3, Ablation::T4];

    pub fn label(&self) -> &'static str {
        match self {
            Ablation::T1 => "T1",
            Ablation::T2 => "T2",
            Ablation::T3 => "T3",
            Ablation::T4 => "T4",
        }
    }

    pub fn uses_denoiser(&self) -> bool {
        !matches!(self, Ablation::T2)
    }

    pub fn uses_deblur(&self) -> bool {
        !matches!(self, Ablation::T1)
    }

    pub fn learns_bias(&self) -> bool {
        matches!(self, Ablation::T2 | Ablation::T4)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation {s:?}, expected T1..T4")))
    }
}

/// What T2 feeds the deblurring network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawInput {
    /// Per-scene mean of all frames.
    #[default]
    FrameMean,
    /// The first frame of each scene.
    SingleFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub denoiser_spec: UNetSpec,
    pub deblur_spec: UNetSpec,
    pub sn2n: Sn2nTrainConfig,
    pub deblur: DeblurTrainConfig,
    pub pair_rule: PairRule,
    pub raw_input: RawInput,
}

impl Default for PipelineConfig {
    /// Desk scale: narrow networks and learning rates that converge within
    /// a couple of thousand steps.
    fn default() -> Self {
        Self {
            denoiser_spec: UNetSpec::denoiser(8),
            deblur_spec: UNetSpec::deblur(8),
            sn2n: Sn2nTrainConfig {
                steps: 600,
                learning_rate: 1e-3,
                ..Default::default()
            },
            deblur: DeblurTrainConfig {
                steps: 800,
                net_lr: 1e-3,
                ..Default::default()
            },
            pair_rule: PairRule::AdjacentPairs,
            raw_input: RawInput::SingleFrame,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, spec) in [
            ("denoiser_spec", &self.denoiser_spec),
            ("deblur_spec", &self.deblur_spec),
        ] {
            if let Err(e) = spec.validate() {
                errs.push(format!("{name}: {e}"));
            }
        }
        errs.extend(self.sn2n.validate().into_iter().map(|e| format!("sn2n.{e}")));
        errs.extend(self.deblur.validate().into_iter().map(|e| format!("deblur.{e}")));
        errs
    }

    /// The same configuration with every stage seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.sn2n.seed = seed;
        c.deblur.seed = seed;
        c
    }
}

/// One scene: its frames and, for simulated data, the sharp latent.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub name: String,
    pub latent: Option<Image>,
    pub sequence: FrameSequence,
}

#[derive(Debug, Clone)]
pub struct SceneOutput {
    pub name: String,
    pub image: Image,
    pub quality: Option<QualityReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub ablation: Ablation,
    pub scenes: Vec<SceneOutput>,
    pub denoiser_trace: Vec<f64>,
    pub deblur_trace: Vec<f64>,
    pub bias: Option<BiasField>,
    pub deblur_model: Option<TrainedDeblur>,
}

impl PipelineResult {
    /// Mean PSNR over scenes with a known latent.
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.scenes.iter().filter_map(|s| s.quality.map(|q| q.psnr)))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.scenes.iter().filter_map(|s| s.quality.map(|q| q.ssim)))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Pools the training pairs of every scene.
pub fn scene_pairs(scenes: &[SceneData], rule: PairRule) -> Result<FramePairSet> {
    Ok(FramePairSet::merge(
        scenes
            .iter()
            .map(|s| make_pairs(&s.sequence, rule))
            .collect::<Result<Vec<_>>>()?,
    ))
}

/// `y′` of every scene: the mean of its denoised frames.
pub fn denoised_observations(model: &mut TrainedDenoiser, scenes: &[SceneData]) -> Result<Vec<Image>> {
    scenes
        .iter()
        .map(|s| {
            let frames: Vec<&Image> = s.sequence.frames.iter().collect();
            Image::average(&denoise_all(model, &frames)?)
        })
        .collect()
}

fn raw_observations(scenes: &[SceneData], input: RawInput) -> Result<Vec<Image>> {
    scenes
        .iter()
        .map(|s| match input {
            RawInput::FrameMean => s.sequence.frame_mean(),
            RawInput::SingleFrame => Ok(s.sequence.frames[0].clone()),
        })
        .collect()
}

fn check_scenes(scenes: &[SceneData], psf: &Psf) -> Result<()> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::InvalidArgument("pipeline needs at least one scene".into()))?;
    let dims = first.sequence.dims();
    for s in scenes {
        if s.sequence.is_empty() {
            return Err(Error::InvalidArgument(format!("scene {} has no frames", s.name)));
        }
        if s.sequence.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: s.sequence.dims(),
            });
        }
    }
    if psf.grid() != dims {
        return Err(Error::OtfSizeMismatch {
            otf: psf.grid(),
            image: dims,
        });
    }
    Ok(())
}

fn outputs(scenes: &[SceneData], images: Vec<Image>) -> Result<Vec<SceneOutput>> {
    scenes
        .iter()
        .zip(images)
        .map(|(s, image)| {
            let quality = s
                .latent
                .as_ref()
                .map(|x| QualityReport::compute(x, &image))
                .transpose()?;
            Ok(SceneOutput {
                name: s.name.clone(),
                image,
                quality,
            })
        })
        .collect()
}

fn deblur_stage(
    ablation: Ablation,
    inputs: Vec<Image>,
    scenes: &[SceneData],
    psf: &Psf,
    cfg: &PipelineConfig,
    denoiser_trace: Vec<f64>,
) -> Result<PipelineResult> {
    let train_cfg = DeblurTrainConfig {
        freeze_bias: !ablation.learns_bias(),
        ..cfg.deblur.clone()
    };
    let mut model = train_deblur(&inputs, psf, &cfg.deblur_spec, &train_cfg)?;
    let images = inputs
        .iter()
        .map(|y| reconstruct(&mut model, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineResult {
        ablation,
        scenes: outputs(scenes, images)?,
        denoiser_trace,
        deblur_trace: model.trace.clone(),
        bias: ablation.learns_bias().then(|| model.bias.clone()),
        deblur_model: Some(model),
    })
}

/// Output of the denoising stage: `y′` per scene and the training trace.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub y_primes: Vec<Image>,
    pub trace: Vec<f64>,
}

/// Trains the denoiser on every scene's pairs and denoises all frames.
pub fn train_stage1(scenes: &[SceneData], cfg: &PipelineConfig) -> Result<Stage1> {
    let pairs = scene_pairs(scenes, cfg.pair_rule)?;
    let mut model = train_denoiser(&pairs, &cfg.denoiser_spec, &cfg.sn2n)?;
    Ok(Stage1 {
        y_primes: denoised_observations(&mut model, scenes)?,
        trace: model.trace,
    })
}

/// Runs one arm given an already trained denoising stage (ignored by T2).
pub fn run_with_stage1(
    scenes: &[SceneData],
    psf: &Psf,
    ablation: Ablation,
    cfg: &PipelineConfig,
    stage1: &Stage1,
) -> Result<PipelineResult> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    check_scenes(scenes, psf)?;
    if stage1.y_primes.len() != scenes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} denoised observations for {} scenes",
            stage1.y_primes.len(),
            scenes.len()
        )));
    }
    match ablation {
        Ablation::T1 => Ok(PipelineResult {
            ablation,
            scenes: outputs(scenes, stage1.y_primes.clone())?,
            denoiser_trace: stage1.trace.clone(),
            deblur_trace: Vec::new(),
            bias: None,
            deblur_model: None,
        }),
        Ablation::T2 => deblur_stage(
            ablation,
            raw_observations(scenes, cfg.raw_input)?,
            scenes,
            psf,
            cfg,
            Vec::new(),
        ),
        Ablation::T3 | Ablation::T4 => deblur_stage(
            ablation,
            stage1.y_primes.clone(),
            scenes,
            psf,
            cfg,
            stage1.trace.clone(),
        ),
    }
}

/// Runs several ablation arms, training the shared denoiser once.
pub fn run_ablations(
    scenes: &[SceneData],
    psf: &Psf,
    ablations: &[Ablation],
    cfg: &PipelineConfig,
) -> Result<Vec<PipelineResult>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    check_scenes(scenes, psf)?;
    let stage1 = if ablations.iter().any(|a| a.uses_denoiser()) {
        train_stage1(scenes, cfg)?
    } else {
        Stage1 {
            y_primes: scenes.iter().map(|s| s.sequence.frames[0].clone()).collect(),
            trace: Vec::new(),
        }
    };
    ablations
        .iter()
        .map(|&a| run_with_stage1(scenes, psf, a, cfg, &stage1))
        .collect()
}

pub fn run_pipeline(
    scenes: &[SceneData],
    psf: &Psf,
    ablation: Ablation,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    Ok(run_ablations(scenes, psf, &[ablation], cfg)?.remove(0))
}
