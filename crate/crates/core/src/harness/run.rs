//! Executes an experiment config and records the result as an immutable,
//! content-addressed run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deblur::BiasField;
use crate::deconv::run_classical;
use crate::degradation::{perturb_psf, LatentSource, Manifest, NoiseCondition, PsfSpec};
use crate::error::{Error, Result};
use crate::frequency::{stagnation_experiment, DEFAULT_ZERO_TOL};
use crate::image::Image;
use crate::metrics::{pearson, QualityReport};
use crate::pipeline::{
    run_ablations, run_with_stage1, train_stage1, Ablation, PipelineConfig, PipelineResult, RawInput, SceneData,
};
use crate::psf::Psf;
use crate::rng::SeedTree;

use super::config::{ExperimentConfig, Method, Scenario};
use super::pool::map_bounded;

pub const RUN_FILE: &str = "run.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const RESULTS_HEADER: &str = "run_id,cell,method,seed,scene,psnr,ssim";

/// One quality measurement: a method on a scene in a sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub cell: String,
    pub method: String,
    pub seed: u64,
    pub scene: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// A loss trace stored as `step,loss` CSV. `floor` is drawn as a line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRef {
    pub cell: String,
    pub method: String,
    pub seed: u64,
    pub kind: String,
    pub path: PathBuf,
    pub floor: Option<f64>,
}

/// A learned bias field and the true per-pixel noise mean, as float containers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRef {
    pub cell: String,
    pub method: String,
    pub seed: u64,
    pub learned: PathBuf,
    pub truth: PathBuf,
    pub learned_mean: f64,
    pub truth_mean: f64,
    pub pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRef {
    pub kind: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub job: String,
    pub seed: u64,
    pub seconds: f64,
}

/// A sweep cell that errored. The rest of the sweep still ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub job: String,
    pub seed: u64,
    pub error: String,
}

/// Everything a run produced. Paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub run_id: String,
    pub content_hash: String,
    pub config: ExperimentConfig,
    pub rows: Vec<MetricRow>,
    pub traces: Vec<TraceRef>,
    pub biases: Vec<BiasRef>,
    pub checkpoints: Vec<PathBuf>,
    pub figures: Vec<FigureRef>,
    pub timings: Vec<Timing>,
    pub failures: Vec<CellFailure>,
    pub finalized: bool,
}

impl ExperimentRun {
    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(
            run_dir.as_ref().join(RUN_FILE),
        )?)?)
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(run_dir.join(RUN_FILE), text)?;
        Ok(())
    }

    /// Rows as CSV. Every row carries the run id, seed and scene it came from.
    pub fn results_csv(&self) -> String {
        let mut out = String::from(RESULTS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6}",
                self.run_id,
                csv_field(&r.cell),
                csv_field(&r.method),
                r.seed,
                csv_field(&r.scene),
                r.psnr,
                r.ssim
            );
        }
        out
    }

    /// Mean PSNR and SSIM of `method` in `cell` over every seed and scene.
    pub fn mean_quality(&self, cell: &str, method: &str) -> Option<(f64, f64)> {
        let rows: Vec<&MetricRow> = self
            .rows
            .iter()
            .filter(|r| r.cell == cell && r.method == method)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        ))
    }

    /// Distinct cells in the order they were first produced.
    pub fn cells(&self) -> Vec<String> {
        let mut cells: Vec<String> = Vec::new();
        for r in &self.rows {
            if !cells.contains(&r.cell) {
                cells.push(r.cell.clone());
            }
        }
        cells
    }

    pub fn methods(&self) -> Vec<String> {
        let mut methods: Vec<String> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
        methods
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Hash of everything that determines a run's results: the config without
/// its output location and worker count, and the bytes of referenced files.
pub fn content_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut canon = cfg.clone();
    canon.output_dir = None;
    canon.workers = 1;
    canon.scenes.manifest = None;
    let mut h = Sha256::new();
    h.update(b"pn2n-run-v1\n");
    h.update(serde_json::to_vec(&canon)?);
    if let Some(path) = &cfg.scenes.manifest {
        let m = Manifest::load(path)?;
        h.update(b"\nmanifest\n");
        h.update(serde_json::to_vec(&strip_paths(&m))?);
        for s in &m.scenes {
            if let LatentSource::Path(p) = &s.latent {
                h.update(b"\nlatent\n");
                h.update(std::fs::read(p)?);
            }
        }
    }
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// The manifest with latent paths reduced to file names, so moving the
/// benchmark directory does not change the hash.
fn strip_paths(m: &Manifest) -> Manifest {
    let mut m = m.clone();
    for s in &mut m.scenes {
        if let LatentSource::Path(p) = &mut s.latent {
            *p = p.file_name().map(PathBuf::from).unwrap_or_default();
        }
    }
    m
}

pub fn run_id(cfg: &ExperimentConfig, hash: &str) -> String {
    let scenario = serde_json::to_value(cfg.scenario)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let prefix = if cfg.name.is_empty() { scenario } else { slug(&cfg.name) };
    format!("{prefix}-{}", &hash[..12])
}

pub(crate) fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '.' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

/// What happens when the run directory already holds a finalized run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Existing {
    /// Return the stored run without recomputing.
    #[default]
    Reuse,
    /// Fail with an error.
    Refuse,
}

#[derive(Debug, Clone)]
enum JobKind {
    Ablate,
    Single,
    NoiseSweep { condition: NoiseCondition, psf: PsfSpec },
    PsfRobustness,
    Hyper { axis: &'static str, value: f64 },
}

#[derive(Debug, Clone)]
struct Job {
    name: String,
    seed: u64,
    kind: JobKind,
}

struct NamedTrace {
    cell: String,
    method: String,
    kind: String,
    points: Vec<(usize, f64)>,
    floor: Option<f64>,
}

struct NamedBias {
    cell: String,
    method: String,
    learned: BiasField,
    truth: Image,
}

#[derive(Default)]
struct JobOutput {
    rows: Vec<MetricRow>,
    traces: Vec<NamedTrace>,
    biases: Vec<NamedBias>,
    checkpoints: Vec<(String, crate::nn::Checkpoint)>,
}

fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        match cfg.scenario {
            Scenario::Ablate => out.push(Job {
                name: "ablate".into(),
                seed,
                kind: JobKind::Ablate,
            }),
            Scenario::Single => out.push(Job {
                name: "single".into(),
                seed,
                kind: JobKind::Single,
            }),
            Scenario::PsfRobustness => out.push(Job {
                name: "psf-robustness".into(),
                seed,
                kind: JobKind::PsfRobustness,
            }),
            Scenario::NoiseSweep => {
                let n = &cfg.noise_sweep;
                for &condition in &n.conditions {
                    for (severity, psf) in [("mild", &n.mild_psf), ("severe", &n.severe_psf)] {
                        out.push(Job {
                            name: format!("{}/{severity}", condition.label()),
                            seed,
                            kind: JobKind::NoiseSweep {
                                condition,
                                psf: psf.clone(),
                            },
                        });
                    }
                }
            }
            Scenario::HyperSweep => {
                let h = &cfg.hyper_sweep;
                let axes: [(&'static str, Vec<f64>); 4] = [
                    ("net_lr", h.net_lr.clone()),
                    ("bias_lr", h.bias_lr.clone()),
                    ("init_steps", h.init_steps.iter().map(|&v| v as f64).collect()),
                    ("scene_count", h.scene_counts.iter().map(|&v| v as f64).collect()),
                ];
                for (axis, values) in axes {
                    for value in values {
                        out.push(Job {
                            name: format!("{axis}={value}"),
                            seed,
                            kind: JobKind::Hyper { axis, value },
                        });
                    }
                }
            }
        }
    }
    out
}

/// Simulates the run's scenes for one seed. All scenes must share a PSF.
fn simulate_scenes(
    cfg: &ExperimentConfig,
    seed: u64,
    noise: Option<NoiseCondition>,
    psf: Option<&PsfSpec>,
    count: Option<usize>,
) -> Result<(Vec<SceneData>, Psf)> {
    let mut cfg = cfg.clone();
    if let (Some(c), None) = (count, &cfg.scenes.manifest) {
        cfg.scenes.count = c;
    }
    let mut entries = cfg.scene_entries(noise, psf)?;
    if let Some(c) = count {
        if entries.len() < c {
            return Err(Error::InvalidArgument(format!(
                "{c} scenes requested but the manifest has {}",
                entries.len()
            )));
        }
        entries.truncate(c);
    }
    let mut scenes = Vec::with_capacity(entries.len());
    let mut shared: Option<Psf> = None;
    for e in &entries {
        let (latent, psf, sequence) = e.simulate(seed)?;
        match &shared {
            None => shared = Some(psf),
            Some(p) if p.kernel() != psf.kernel() || p.grid() != psf.grid() => {
                return Err(Error::InvalidArgument(format!(
                    "scene {} has a different PSF or size; a run needs one shared PSF",
                    e.name
                )))
            }
            Some(_) => {}
        }
        scenes.push(SceneData {
            name: e.name.clone(),
            latent: Some(latent),
            sequence,
        });
    }
    let psf = shared.ok_or_else(|| Error::InvalidArgument("no scenes".into()))?;
    Ok((scenes, psf))
}

fn classical_rows(
    cfg: &ExperimentConfig,
    cell: &str,
    method: Method,
    seed: u64,
    scenes: &[SceneData],
    psf: &Psf,
) -> Result<Vec<MetricRow>> {
    let cm = method.classical().expect("classical method");
    scenes
        .iter()
        .map(|s| {
            let obs = match cfg.classical_input {
                RawInput::SingleFrame => s.sequence.frames[0].clone(),
                RawInput::FrameMean => s.sequence.frame_mean()?,
            };
            let out = run_classical(cm, &obs, psf, &cfg.deconv)?;
            let latent = s.latent.as_ref().expect("simulated scenes have latents");
            let q = QualityReport::compute(latent, &out.image)?;
            Ok(MetricRow {
                cell: cell.into(),
                method: method.label().into(),
                seed,
                scene: s.name.clone(),
                psnr: q.psnr,
                ssim: q.ssim,
            })
        })
        .collect()
}

fn steps_trace(values: &[f64]) -> Vec<(usize, f64)> {
    values.iter().copied().enumerate().collect()
}

/// Rows, deblur trace, bias and optionally the checkpoint of one pipeline result.
fn absorb(
    out: &mut JobOutput,
    cell: &str,
    method: &str,
    seed: u64,
    r: &PipelineResult,
    truth: &Image,
    keep_checkpoint: bool,
) {
    for s in &r.scenes {
        if let Some(q) = s.quality {
            out.rows.push(MetricRow {
                cell: cell.into(),
                method: method.into(),
                seed,
                scene: s.name.clone(),
                psnr: q.psnr,
                ssim: q.ssim,
            });
        }
    }
    if !r.deblur_trace.is_empty() {
        out.traces.push(NamedTrace {
            cell: cell.into(),
            method: method.into(),
            kind: "deblur".into(),
            points: steps_trace(&r.deblur_trace),
            floor: None,
        });
    }
    if let Some(b) = &r.bias {
        out.biases.push(NamedBias {
            cell: cell.into(),
            method: method.into(),
            learned: b.clone(),
            truth: truth.clone(),
        });
    }
    if keep_checkpoint {
        if let Some(m) = &r.deblur_model {
            out.checkpoints
                .push((format!("{}__{}__s{seed}", slug(cell), slug(method)), m.checkpoint()));
        }
    }
}

fn denoiser_trace(out: &mut JobOutput, cell: &str, trace: &[f64]) {
    if !trace.is_empty() {
        out.traces.push(NamedTrace {
            cell: cell.into(),
            method: "SN2N".into(),
            kind: "denoiser".into(),
            points: steps_trace(trace),
            floor: None,
        });
    }
}

fn run_job(cfg: &ExperimentConfig, job: &Job) -> Result<JobOutput> {
    let mut out = JobOutput::default();
    let pipe = cfg.pipeline.with_seed(job.seed);
    let seed = job.seed;
    match &job.kind {
        JobKind::Ablate => {
            let (scenes, psf) = simulate_scenes(cfg, seed, None, None, None)?;
            let truth = scenes[0].sequence.true_bias_field.clone();
            let results = run_ablations(&scenes, &psf, &cfg.ablate.arms, &pipe)?;
            if let Some(r) = results.iter().find(|r| r.ablation.uses_denoiser()) {
                denoiser_trace(&mut out, &job.name, &r.denoiser_trace);
            }
            for r in &results {
                absorb(&mut out, &job.name, r.ablation.label(), seed, r, &truth, true);
            }
        }
        JobKind::Single => {
            let (scenes, psf) = simulate_scenes(cfg, seed, None, None, None)?;
            let truth = scenes[0].sequence.true_bias_field.clone();
            let method = cfg.single.method;
            if method == Method::Pn2n {
                let r = run_ablations(&scenes, &psf, &[Ablation::T4], &pipe)?.remove(0);
                denoiser_trace(&mut out, &job.name, &r.denoiser_trace);
                absorb(&mut out, &job.name, method.label(), seed, &r, &truth, true);
            } else {
                out.rows = classical_rows(cfg, &job.name, method, seed, &scenes, &psf)?;
            }
            if cfg.single.stagnation {
                let latent = scenes[0].latent.as_ref().expect("simulated");
                let curves =
                    stagnation_experiment(latent, &psf, &truth, cfg.single.stagnation_steps, DEFAULT_ZERO_TOL)?;
                for (kind, curve) in [
                    ("stagnation-biased", curves.biased),
                    ("stagnation-corrected", curves.corrected),
                ] {
                    out.traces.push(NamedTrace {
                        cell: job.name.clone(),
                        method: "LS".into(),
                        kind: kind.into(),
                        points: curve.points,
                        floor: Some(curves.floor),
                    });
                }
            }
        }
        JobKind::NoiseSweep { condition, psf } => {
            let (scenes, psf) = simulate_scenes(cfg, seed, Some(*condition), Some(psf), None)?;
            let truth = scenes[0].sequence.true_bias_field.clone();
            for &m in &cfg.noise_sweep.methods {
                if m == Method::Pn2n {
                    let r = run_ablations(&scenes, &psf, &[Ablation::T4], &pipe)?.remove(0);
                    denoiser_trace(&mut out, &job.name, &r.denoiser_trace);
                    absorb(&mut out, &job.name, m.label(), seed, &r, &truth, false);
                } else {
                    out.rows.extend(classical_rows(cfg, &job.name, m, seed, &scenes, &psf)?);
                }
            }
        }
        JobKind::PsfRobustness => {
            let (scenes, psf) = simulate_scenes(cfg, seed, None, None, None)?;
            let truth = scenes[0].sequence.true_bias_field.clone();
            let stage1 = train_stage1(&scenes, &pipe)?;
            denoiser_trace(&mut out, "psf-robustness", &stage1.trace);
            let r = &cfg.psf_robustness;
            let psf_seed = SeedTree::new(seed).child("psf-perturbation").seed();
            let mut cells: Vec<(String, Psf, bool)> = Vec::new();
            for &reg in &r.regularization {
                cells.push((format!("accurate/{}", reg_label(reg)), psf.clone(), reg));
            }
            for p in &r.perturbations {
                let perturbed = perturb_psf(&psf, *p, psf_seed)?;
                for &reg in &r.regularization {
                    cells.push((format!("{p}/{}", reg_label(reg)), perturbed.clone(), reg));
                }
            }
            for (cell, assumed, reg) in cells {
                let mut c: PipelineConfig = pipe.clone();
                c.deblur.regularization_enabled = reg;
                let res = run_with_stage1(&scenes, &assumed, Ablation::T4, &c, &stage1)?;
                absorb(&mut out, &cell, Method::Pn2n.label(), seed, &res, &truth, false);
            }
        }
        JobKind::Hyper { axis, value } => {
            let mut c: PipelineConfig = pipe.clone();
            let mut count = None;
            match *axis {
                "net_lr" => c.deblur.net_lr = *value,
                "bias_lr" => c.deblur.bias_lr = *value,
                "init_steps" => c.sn2n.steps = *value as usize,
                "scene_count" => count = Some(*value as usize),
                other => unreachable!("unknown axis {other}"),
            }
            let (scenes, psf) = simulate_scenes(cfg, seed, None, None, count)?;
            let truth = scenes[0].sequence.true_bias_field.clone();
            let r = run_ablations(&scenes, &psf, &[Ablation::T4], &c)?.remove(0);
            absorb(&mut out, &job.name, Method::Pn2n.label(), seed, &r, &truth, false);
        }
    }
    Ok(out)
}

fn reg_label(on: bool) -> &'static str {
    if on {
        "reg-on"
    } else {
        "reg-off"
    }
}

fn write_trace(path: &Path, points: &[(usize, f64)]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (s, l) in points {
        let _ = writeln!(text, "{s},{l:.9e}");
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Directory a config's run is (or will be) written to.
pub fn run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let hash = content_hash(cfg)?;
    Ok(cfg.output_root().join(run_id(cfg, &hash)))
}

/// Runs every cell of the experiment on a bounded worker pool and writes the
/// run directory. Cell errors are recorded and the remaining cells still run.
pub fn execute(cfg: &ExperimentConfig, existing: Existing) -> Result<(ExperimentRun, PathBuf)> {
    cfg.validate()?;
    let hash = content_hash(cfg)?;
    let id = run_id(cfg, &hash);
    let dir = cfg.output_root().join(&id);
    if dir.join(RUN_FILE).exists() {
        let run = ExperimentRun::load(&dir)?;
        if run.finalized {
            return match existing {
                Existing::Reuse => Ok((run, dir)),
                Existing::Refuse => Err(Error::InvalidArgument(format!(
                    "run {id} already exists at {} and is immutable",
                    dir.display()
                ))),
            };
        }
    }
    for sub in ["traces", "biases", "checkpoints"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;

    let jobs = jobs(cfg);
    log::info!("run {id}: {} jobs on {} workers", jobs.len(), cfg.workers);
    let outputs = map_bounded(&jobs, cfg.workers, |job| {
        let t = Instant::now();
        let r = run_job(cfg, job);
        if let Err(e) = &r {
            log::warn!("job {} seed {} failed: {e}", job.name, job.seed);
        }
        (r, t.elapsed().as_secs_f64())
    });

    let mut run = ExperimentRun {
        run_id: id,
        content_hash: hash,
        config: cfg.clone(),
        rows: Vec::new(),
        traces: Vec::new(),
        biases: Vec::new(),
        checkpoints: Vec::new(),
        figures: Vec::new(),
        timings: Vec::new(),
        failures: Vec::new(),
        finalized: false,
    };
    for (job, (result, seconds)) in jobs.iter().zip(outputs) {
        run.timings.push(Timing {
            job: job.name.clone(),
            seed: job.seed,
            seconds,
        });
        let out = match result {
            Ok(o) => o,
            Err(e) => {
                run.failures.push(CellFailure {
                    job: job.name.clone(),
                    seed: job.seed,
                    error: e.to_string(),
                });
                continue;
            }
        };
        run.rows.extend(out.rows);
        for t in out.traces {
            let rel = PathBuf::from("traces").join(format!(
                "{}__{}__s{}__{}.csv",
                slug(&t.cell),
                slug(&t.method),
                job.seed,
                t.kind
            ));
            write_trace(&dir.join(&rel), &t.points)?;
            run.traces.push(TraceRef {
                cell: t.cell,
                method: t.method,
                seed: job.seed,
                kind: t.kind,
                path: rel,
                floor: t.floor,
            });
        }
        for b in out.biases {
            let stem = format!("{}__{}__s{}", slug(&b.cell), slug(&b.method), job.seed);
            let learned = PathBuf::from("biases").join(format!("{stem}__learned.pn2n"));
            let truth = PathBuf::from("biases").join(format!("{stem}__truth.pn2n"));
            let img = b.learned.to_image()?;
            img.save_container(dir.join(&learned))?;
            b.truth.save_container(dir.join(&truth))?;
            run.biases.push(BiasRef {
                cell: b.cell,
                method: b.method,
                seed: job.seed,
                learned,
                truth,
                learned_mean: img.mean(),
                truth_mean: b.truth.mean(),
                pearson: pearson(&img, &b.truth).unwrap_or(f64::NAN),
            });
        }
        for (name, ck) in out.checkpoints {
            let rel = PathBuf::from("checkpoints").join(format!("{name}.ckpt"));
            ck.save(dir.join(&rel))?;
            run.checkpoints.push(rel);
        }
    }
    std::fs::write(dir.join(RESULTS_FILE), run.results_csv())?;
    run.finalized = true;
    run.save(&dir)?;
    Ok((run, dir))
}

/// Records figure paths on a finalized run. Only the figure list changes;
/// metrics and artifacts stay as they were.
pub(crate) fn record_figures(run_dir: &Path, figures: Vec<FigureRef>) -> Result<ExperimentRun> {
    let mut run = ExperimentRun::load(run_dir)?;
    run.figures = figures;
    run.save(run_dir)?;
    Ok(run)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::deblur::DeblurTrainConfig;
    use crate::denoiser::Sn2nTrainConfig;
    use crate::nn::UNetSpec;

    pub(crate) fn tiny(scenario: Scenario, root: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(scenario);
        cfg.output_dir = Some(root.to_path_buf());
        cfg.seeds = vec![0];
        cfg.scenes.count = 2;
        cfg.scenes.size = 32;
        cfg.scenes.frames = 4;
        cfg.pipeline = PipelineConfig {
            denoiser_spec: UNetSpec::denoiser(2),
            deblur_spec: UNetSpec::deblur(2),
            sn2n: Sn2nTrainConfig {
                steps: 3,
                ..Default::default()
            },
            deblur: DeblurTrainConfig {
                steps: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg
    }

    #[test]
    fn hash_ignores_location_and_workers() {
        let dir = tempfile::tempdir().unwrap();
        let a = tiny(Scenario::Ablate, dir.path());
        let mut b = a.clone();
        b.output_dir = Some("/elsewhere".into());
        b.workers = 4;
        assert_eq!(content_hash(&a).unwrap(), content_hash(&b).unwrap());
        let mut c = a.clone();
        c.seeds = vec![1];
        assert_ne!(content_hash(&a).unwrap(), content_hash(&c).unwrap());
        assert_eq!(content_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn ablate_run_writes_traceable_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Scenario::Ablate, dir.path());
        cfg.ablate.arms = vec![Ablation::T1, Ablation::T4];
        let (run, path) = execute(&cfg, Existing::Refuse).unwrap();
        assert!(run.finalized && run.failures.is_empty());
        assert_eq!(run.rows.len(), 4);
        let csv = std::fs::read_to_string(path.join(RESULTS_FILE)).unwrap();
        assert_eq!(csv, run.results_csv());
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[0], run.run_id);
            assert_eq!(f[3], "0");
            assert!(f[4].starts_with("scene"));
        }
        assert_eq!(run.biases.len(), 1);
        assert!(run.traces.iter().any(|t| t.kind == "denoiser"));
        for t in &run.traces {
            assert!(path.join(&t.path).exists());
        }
        assert_eq!(run.checkpoints.len(), 1);
        assert!(execute(&cfg, Existing::Refuse).is_err());
        let (again, _) = execute(&cfg, Existing::Reuse).unwrap();
        assert_eq!(again, run);
    }

    #[test]
    fn failing_cells_are_recorded_and_the_sweep_continues() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.json");
        let scene = |name: &str, seed: u64| {
            serde_json::json!({"name": name, "latent": {"synthetic": {"size": 32, "seed": seed}},
                "psf": "psf-2", "noise": {"kind": "C3"}, "frames": 4, "seed": 0})
        };
        std::fs::write(
            &manifest,
            serde_json::json!({"version": 1, "scenes": [scene("a", 0), scene("b", 1)]}).to_string(),
        )
        .unwrap();
        let mut cfg = tiny(Scenario::HyperSweep, dir.path());
        cfg.scenes.manifest = Some(manifest);
        cfg.hyper_sweep.net_lr = vec![1e-3];
        cfg.hyper_sweep.bias_lr = vec![];
        cfg.hyper_sweep.init_steps = vec![];
        cfg.hyper_sweep.scene_counts = vec![1, 5];
        let (run, _) = execute(&cfg, Existing::Refuse).unwrap();
        assert_eq!(run.failures.len(), 1, "{:?}", run.failures);
        assert_eq!(run.failures[0].job, "scene_count=5");
        assert!(run.failures[0].error.contains("manifest has 2"));
        assert_eq!(run.cells(), vec!["net_lr=0.001", "scene_count=1"]);
        assert_eq!(run.rows.iter().filter(|r| r.cell == "scene_count=1").count(), 1);
    }

    #[test]
    fn zero_perturbation_matches_the_accurate_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Scenario::PsfRobustness, dir.path());
        cfg.psf_robustness.perturbations = vec![crate::degradation::Perturbation::Blur { sigma: 0.0 }];
        cfg.psf_robustness.regularization = vec![true];
        let (run, _) = execute(&cfg, Existing::Refuse).unwrap();
        let acc: Vec<f64> = run
            .rows
            .iter()
            .filter(|r| r.cell == "accurate/reg-on")
            .map(|r| r.psnr)
            .collect();
        let zero: Vec<f64> = run
            .rows
            .iter()
            .filter(|r| r.cell == "blur(s=0)/reg-on")
            .map(|r| r.psnr)
            .collect();
        assert_eq!(acc.len(), 2);
        assert_eq!(acc, zero);
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("C3/severe"), "c3-severe");
        assert_eq!(slug("blur(s=0.2)/reg-on"), "blur-s-0.2-reg-on");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
    }
}
