//! Experiment configuration, read from TOML. Unknown keys are errors and
//! validation reports every problem at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deconv::{ClassicalMethod, DeconvParams};
use crate::degradation::{LatentSource, Manifest, NoiseCondition, Perturbation, PsfSpec, SceneEntry, SyntheticLatent};
use crate::error::{Error, Result};
use crate::pipeline::{Ablation, PipelineConfig, RawInput};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the directory runs are written under.
pub const OUTPUT_ROOT_ENV: &str = "PN2N_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Ablate,
    NoiseSweep,
    PsfRobustness,
    HyperSweep,
    Single,
}

/// A restoration method compared in sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wd,
    Lra,
    Nlr,
    Pn2n,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Wd, Method::Lra, Method::Nlr, Method::Pn2n];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Wd => "WD",
            Method::Lra => "LRA",
            Method::Nlr => "NLR",
            Method::Pn2n => "PN2N",
        }
    }

    pub fn classical(&self) -> Option<ClassicalMethod> {
        match self {
            Method::Wd => Some(ClassicalMethod::Wd),
            Method::Lra => Some(ClassicalMethod::Lra),
            Method::Nlr => Some(ClassicalMethod::Nlr),
            Method::Pn2n => None,
        }
    }
}

/// Scenes to run on: a benchmark manifest, or generated synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSet {
    pub manifest: Option<PathBuf>,
    /// Number of synthetic scenes when no manifest is given.
    pub count: usize,
    pub size: usize,
    pub frames: usize,
    pub noise: NoiseCondition,
    pub psf: PsfSpec,
}

impl Default for SceneSet {
    fn default() -> Self {
        Self {
            manifest: None,
            count: 3,
            size: 64,
            frames: 20,
            noise: NoiseCondition::C3,
            psf: PsfSpec::Label("psf-4".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSettings {
    pub arms: Vec<Ablation>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            arms: Ablation::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSweepSettings {
    pub conditions: Vec<NoiseCondition>,
    pub mild_psf: PsfSpec,
    pub severe_psf: PsfSpec,
    pub methods: Vec<Method>,
}

impl Default for NoiseSweepSettings {
    fn default() -> Self {
        Self {
            conditions: vec![
                NoiseCondition::C1,
                NoiseCondition::C2,
                NoiseCondition::C3,
                NoiseCondition::C4,
            ],
            mild_psf: PsfSpec::Label("psf-3".into()),
            severe_psf: PsfSpec::Label("psf-4".into()),
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfRobustnessSettings {
    pub perturbations: Vec<Perturbation>,
    pub regularization: Vec<bool>,
}

impl Default for PsfRobustnessSettings {
    fn default() -> Self {
        let mut perturbations: Vec<Perturbation> = [0.2, 0.5, 1.0]
            .into_iter()
            .map(|sigma| Perturbation::Blur { sigma })
            .collect();
        perturbations.extend(
            [1.0, 2.0, 5.0]
                .into_iter()
                .map(|level_percent| Perturbation::Noise { level_percent }),
        );
        Self {
            perturbations,
            regularization: vec![true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSweepSettings {
    pub net_lr: Vec<f64>,
    pub bias_lr: Vec<f64>,
    /// Denoiser training steps before the deblurring stage.
    pub init_steps: Vec<usize>,
    pub scene_counts: Vec<usize>,
}

impl Default for HyperSweepSettings {
    fn default() -> Self {
        Self {
            net_lr: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            bias_lr: vec![1e-1, 1e-2, 1e-3, 1e-4],
            init_steps: vec![100, 200, 300, 400],
            scene_counts: vec![1, 3, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SingleSettings {
    pub method: Method,
    /// Also record the least-squares stagnation curves on the first scene.
    pub stagnation: bool,
    pub stagnation_steps: usize,
}

impl Default for SingleSettings {
    fn default() -> Self {
        Self {
            method: Method::Pn2n,
            stagnation: false,
            stagnation_steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    #[serde(default)]
    pub name: String,
    /// Overrides the output root for this experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Concurrent sweep cells.
    #[serde(default = "one")]
    pub workers: usize,
    /// Input given to the classical baselines.
    #[serde(default = "single_frame")]
    pub classical_input: RawInput,
    #[serde(default)]
    pub scenes: SceneSet,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub deconv: DeconvParams,
    #[serde(default)]
    pub ablate: AblateSettings,
    #[serde(default)]
    pub noise_sweep: NoiseSweepSettings,
    #[serde(default)]
    pub psf_robustness: PsfRobustnessSettings,
    #[serde(default)]
    pub hyper_sweep: HyperSweepSettings,
    #[serde(default)]
    pub single: SingleSettings,
}

fn one() -> usize {
    1
}

fn single_frame() -> RawInput {
    RawInput::SingleFrame
}

impl ExperimentConfig {
    /// Desk-scale defaults for a scenario.
    pub fn new(scenario: Scenario) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario,
            name: String::new(),
            output_dir: None,
            seeds: vec![0, 1, 2],
            workers: 1,
            classical_input: RawInput::SingleFrame,
            scenes: SceneSet::default(),
            pipeline: PipelineConfig::default(),
            deconv: DeconvParams::default(),
            ablate: AblateSettings::default(),
            noise_sweep: NoiseSweepSettings::default(),
            psf_robustness: PsfRobustnessSettings::default(),
            hyper_sweep: HyperSweepSettings::default(),
            single: SingleSettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config. A relative manifest path resolves
    /// against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: ExperimentConfig = toml::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(m) = &mut cfg.scenes.manifest {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            p.push(format!(
                "schema_version: {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            p.push("seeds: must not be empty".into());
        }
        if self.workers == 0 {
            p.push("workers: must be >= 1".into());
        }
        let s = &self.scenes;
        match &s.manifest {
            Some(m) if !m.exists() => p.push(format!("scenes.manifest: {} does not exist", m.display())),
            Some(m) => {
                if let Err(e) = Manifest::load(m) {
                    p.push(format!("scenes.manifest: {e}"));
                }
            }
            None => {
                if s.count == 0 {
                    p.push("scenes.count: must be >= 1".into());
                }
                if s.size < crate::image::Image::MIN_SIDE {
                    p.push(format!("scenes.size: must be >= {}", crate::image::Image::MIN_SIDE));
                }
                if s.frames < 2 || s.frames % 2 != 0 {
                    p.push(format!("scenes.frames: must be even and >= 2, got {}", s.frames));
                }
                if let Err(e) = s.psf.shape() {
                    p.push(format!("scenes.psf: {e}"));
                }
            }
        }
        p.extend(self.pipeline.validate().into_iter().map(|e| format!("pipeline.{e}")));
        p.extend(self.deconv.validate().into_iter().map(|e| format!("deconv.{e}")));
        match self.scenario {
            Scenario::Ablate => {
                if self.ablate.arms.is_empty() {
                    p.push("ablate.arms: must not be empty".into());
                }
            }
            Scenario::NoiseSweep => {
                let n = &self.noise_sweep;
                if n.conditions.is_empty() {
                    p.push("noise_sweep.conditions: must not be empty".into());
                }
                if n.methods.is_empty() {
                    p.push("noise_sweep.methods: must not be empty".into());
                }
                for (key, spec) in [("mild_psf", &n.mild_psf), ("severe_psf", &n.severe_psf)] {
                    if let Err(e) = spec.shape() {
                        p.push(format!("noise_sweep.{key}: {e}"));
                    }
                }
            }
            Scenario::PsfRobustness => {
                let r = &self.psf_robustness;
                if r.regularization.is_empty() {
                    p.push("psf_robustness.regularization: must not be empty".into());
                }
                for (i, m) in r.perturbations.iter().enumerate() {
                    match *m {
                        Perturbation::Blur { sigma } if !(sigma >= 0.0) => {
                            p.push(format!("psf_robustness.perturbations[{i}].sigma: must be >= 0"))
                        }
                        Perturbation::Noise { level_percent } if !(level_percent >= 0.0) => {
                            p.push(format!("psf_robustness.perturbations[{i}].level_percent: must be >= 0"))
                        }
                        _ => {}
                    }
                }
            }
            Scenario::HyperSweep => {
                let h = &self.hyper_sweep;
                for (key, grid) in [("net_lr", &h.net_lr), ("bias_lr", &h.bias_lr)] {
                    if grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                        p.push(format!("hyper_sweep.{key}: every rate must be > 0"));
                    }
                }
                if h.init_steps.contains(&0) {
                    p.push("hyper_sweep.init_steps: must be >= 1".into());
                }
                if h.scene_counts.contains(&0) {
                    p.push("hyper_sweep.scene_counts: must be >= 1".into());
                }
                if h.net_lr.is_empty() && h.bias_lr.is_empty() && h.init_steps.is_empty() && h.scene_counts.is_empty() {
                    p.push("hyper_sweep: every grid is empty".into());
                }
            }
            Scenario::Single => {
                if self.single.stagnation && self.single.stagnation_steps == 0 {
                    p.push("single.stagnation_steps: must be >= 1".into());
                }
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    /// Scene entries to simulate, with the noise condition and PSF replaced
    /// when a sweep cell overrides them.
    pub fn scene_entries(&self, noise: Option<NoiseCondition>, psf: Option<&PsfSpec>) -> Result<Vec<SceneEntry>> {
        let mut entries = match &self.scenes.manifest {
            Some(path) => Manifest::load(path)?.scenes,
            None => (0..self.scenes.count)
                .map(|i| SceneEntry {
                    name: format!("scene{i}"),
                    latent: LatentSource::Synthetic {
                        synthetic: SyntheticLatent {
                            size: self.scenes.size,
                            seed: i as u64,
                        },
                    },
                    psf: self.scenes.psf.clone(),
                    noise: self.scenes.noise,
                    frames: self.scenes.frames,
                    seed: 0,
                })
                .collect(),
        };
        for e in &mut entries {
            if let Some(n) = noise {
                e.noise = n;
            }
            if let Some(p) = psf {
                e.psf = p.clone();
            }
        }
        Ok(entries)
    }

    /// Where this experiment's runs go: `output_dir`, else the
    /// [`OUTPUT_ROOT_ENV`] variable, else [`DEFAULT_OUTPUT_ROOT`].
    pub fn output_root(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(output_root_from_env)
    }
}

pub fn output_root_from_env() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}
