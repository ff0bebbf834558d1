//! Benchmark manifests: a JSON list of scenes to simulate.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::psf::{Psf, PsfShape};
use crate::rng::SeedTree;

use super::noise::NoiseCondition;
use super::scenes::synthetic_scene;
use super::sequence::{generate_sequence, FrameSequence};
use super::shapes::{benchmark_psf_by_label, make_psf};

pub const MANIFEST_VERSION: u32 = 1;

/// Where a scene's latent image comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatentSource {
    Path(PathBuf),
    Synthetic { synthetic: SyntheticLatent },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLatent {
    pub size: usize,
    pub seed: u64,
}

/// A PSF given either explicitly or as a benchmark label (`psf-1`..`psf-5`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PsfSpec {
    Label(String),
    Shape(PsfShape),
}

impl PsfSpec {
    pub fn shape(&self) -> Result<PsfShape> {
        match self {
            PsfSpec::Label(l) => benchmark_psf_by_label(l),
            PsfSpec::Shape(s) => Ok(*s),
        }
    }

    pub fn build(&self, grid: (usize, usize)) -> Result<Psf> {
        make_psf(self.shape()?, grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub name: String,
    pub latent: LatentSource,
    pub psf: PsfSpec,
    pub noise: NoiseCondition,
    pub frames: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    /// Relative latent paths resolve against `base`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::InvalidConfig(vec![format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            )]));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.scenes {
            if let LatentSource::Path(p) = &mut s.latent {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.scenes.is_empty() {
            problems.push("scenes: empty".to_string());
        }
        for (i, s) in self.scenes.iter().enumerate() {
            if s.frames < 2 || s.frames % 2 != 0 {
                problems.push(format!("scenes[{i}].frames: must be even and >= 2, got {}", s.frames));
            }
            if let Err(e) = s.psf.shape() {
                problems.push(format!("scenes[{i}].psf: {e}"));
            }
            if let LatentSource::Path(p) = &s.latent {
                if !p.exists() {
                    problems.push(format!("scenes[{i}].latent: {} does not exist", p.display()));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

impl SceneEntry {
    pub fn load_latent(&self) -> Result<Image> {
        match &self.latent {
            LatentSource::Path(p) => Image::load(p),
            LatentSource::Synthetic { synthetic } => synthetic_scene(synthetic.size, synthetic.seed),
        }
    }

    /// Latent image, PSF and frames. `master_seed` is mixed with the scene's
    /// own seed so a manifest can be replayed under different master seeds.
    pub fn simulate(&self, master_seed: u64) -> Result<(Image, Psf, FrameSequence)> {
        let latent = self.load_latent()?;
        let psf = self.psf.build(latent.dims())?;
        let seed = SeedTree::new(master_seed).child(&self.name).index(self.seed).seed();
        let seq = generate_sequence(&latent, &psf, self.noise, self.frames, seed)?;
        Ok((latent, psf, seq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_latent_forms() {
        let json = r#"{"version":1,"scenes":[
            {"name":"a","latent":{"synthetic":{"size":32,"seed":1}},"psf":"psf-3","noise":{"kind":"C3"},"frames":4,"seed":2},
            {"name":"b","latent":"img.png","psf":{"shape":"gaussian","sigma":1.5},"noise":{"kind":"C1"},"frames":2,"seed":0}
        ]}"#;
        let m: Manifest = serde_json::from_str(json).unwrap();
        assert!(matches!(m.scenes[0].latent, LatentSource::Synthetic { .. }));
        assert!(matches!(m.scenes[1].latent, LatentSource::Path(_)));
        assert_eq!(m.scenes[1].psf.shape().unwrap(), PsfShape::Gaussian { sigma: 1.5 });
        let back: Manifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        // missing file and bad frame counts are both reported
        let mut bad = m.clone();
        bad.scenes[0].frames = 3;
        match bad.validate() {
            Err(Error::InvalidConfig(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let e = SceneEntry {
            name: "s".into(),
            latent: LatentSource::Synthetic {
                synthetic: SyntheticLatent { size: 32, seed: 1 },
            },
            psf: PsfSpec::Label("psf-2".into()),
            noise: NoiseCondition::C3,
            frames: 2,
            seed: 5,
        };
        assert_eq!(e.simulate(7).unwrap().2, e.simulate(7).unwrap().2);
        assert_ne!(e.simulate(7).unwrap().2, e.simulate(8).unwrap().2);
    }
}
