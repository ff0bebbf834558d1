use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pn2n_core::deblur::{reconstruct, train_deblur, DeblurTrainConfig, BIAS_TENSOR};
use pn2n_core::deconv::{run_classical, ClassicalMethod, DeconvParams};
use pn2n_core::degradation::{Manifest, PsfSpec};
use pn2n_core::denoiser::{
    denoise_all, pair_frames, pretrain_finetune, train_denoiser, FramePairSet, PairRule, Sn2nTrainConfig,
};
use pn2n_core::harness::config::{output_root_from_env, OUTPUT_ROOT_ENV};
use pn2n_core::harness::{emit_report, execute, Existing, ExperimentConfig, ExperimentRun, Scenario};
use pn2n_core::nn::{Checkpoint, UNetSpec};
use pn2n_core::pipeline::Ablation;
use pn2n_core::{Error, Image, Psf};

#[derive(Parser)]
#[command(
    name = "pn2n",
    version,
    about = "Self-supervised defocus deblurring under biased noise"
)]
struct Cli {
    /// Root directory for experiment runs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the frame sequences of a benchmark manifest.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pair denoiser on frame directories and write denoised frames.
    Denoise(DenoiseArgs),
    /// Deblur observations with a classical method or the trained network.
    Deblur(DeblurArgs),
    /// Run an ablation config and print the per-scene table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated arms, e.g. T1,T4. Defaults to the config's arms.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<Ablation>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run any experiment config (noise, PSF robustness or hyperparameter sweep).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render the summary table and figures of a finished run.
    Report {
        #[arg(long)]
        run: String,
    },
}

#[derive(Args)]
struct DenoiseArgs {
    /// Directory holding one scene's `frame_*` files. Repeat for more scenes.
    #[arg(long = "frames", required = true)]
    frames: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Fine-tune this denoiser checkpoint instead of training from scratch.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    base: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PairArg::Adjacent)]
    pairs: PairArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairArg {
    Adjacent,
    OddEven,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    Wd,
    Lra,
    Nlr,
    Pn2n,
}

#[derive(Args)]
struct DeblurArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Observation to deblur. Repeat to train the network on several.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Benchmark label (`psf-1`..`psf-5`) or a JSON PSF description.
    #[arg(long)]
    psf: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DeconvParams::default().wiener_k)]
    wiener_k: f64,
    #[arg(long, default_value_t = DeconvParams::default().rl_iterations)]
    rl_iterations: usize,
    #[arg(long, default_value_t = DeconvParams::default().nlr_iterations)]
    nlr_iterations: usize,
    #[arg(long, default_value_t = DeconvParams::default().nlr_alpha)]
    nlr_alpha: f64,
    #[arg(long, default_value_t = DeconvParams::default().nlr_beta)]
    nlr_beta: f64,
    #[arg(long, default_value_t = 800)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    net_lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    bias_lr: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda2: f64,
    /// Drop the bias regularizer.
    #[arg(long)]
    no_reg: bool,
    /// Keep the bias at zero.
    #[arg(long)]
    freeze_bias: bool,
    /// Keep the network learning rate constant instead of cosine-annealing it.
    #[arg(long)]
    constant_lr: bool,
    #[arg(long, default_value_t = 8)]
    base: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn record(&self) -> serde_json::Value {
        match self {
            CliError::Core(Error::InvalidConfig(problems)) => json!({
                "error": { "kind": "invalid_config", "message": "invalid config", "problems": problems }
            }),
            CliError::Core(e) => json!({ "error": { "kind": e.kind(), "message": e.to_string() } }),
            CliError::Usage(m) => json!({ "error": { "kind": "usage", "message": m } }),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidConfig(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(CliError::Usage(e.render().to_string().trim().to_string())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.record());
    ExitCode::from(e.exit_code())
}

fn run(cli: Cli) -> CliResult<()> {
    let root = cli.output_root.clone();
    match cli.command {
        Command::Simulate { manifest, seed, out } => simulate(&manifest, seed, &out),
        Command::Denoise(a) => denoise(&a),
        Command::Deblur(a) => deblur(&a),
        Command::Ablate { config, arms, workers } => {
            let mut cfg = load_config(&config, root, workers)?;
            if cfg.scenario != Scenario::Ablate {
                return Err(CliError::Usage(format!(
                    "{} is not an ablate config; use `pn2n sweep`",
                    config.display()
                )));
            }
            if !arms.is_empty() {
                cfg.ablate.arms = arms;
            }
            cfg.validate()?;
            let (run, dir) = execute(&cfg, Existing::Reuse)?;
            print_ablation(&run);
            finish(&run, &dir)
        }
        Command::Sweep { config, workers } => {
            let cfg = load_config(&config, root, workers)?;
            let (run, dir) = execute(&cfg, Existing::Reuse)?;
            print_summary(&run);
            finish(&run, &dir)
        }
        Command::Report { run } => {
            let dir = root.unwrap_or_else(output_root_from_env).join(&run);
            if !dir.join(pn2n_core::harness::run::RUN_FILE).exists() {
                return Err(CliError::Usage(format!("no run {run} under {}", dir.display())));
            }
            let rep = emit_report(&dir)?;
            println!(
                "{}",
                json!({
                    "run": run,
                    "summary": dir.join(&rep.summary_csv),
                    "figures": rep.figures.iter().map(|f| dir.join(&f.path)).collect::<Vec<_>>(),
                    "warnings": rep.warnings,
                })
            );
            Ok(())
        }
    }
}

fn load_config(path: &Path, root: Option<PathBuf>, workers: Option<usize>) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(r) = root {
        cfg.output_dir = Some(r);
    }
    if let Some(w) = workers {
        cfg.workers = w;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn finish(run: &ExperimentRun, dir: &Path) -> CliResult<()> {
    eprintln!("run {} in {}", run.run_id, dir.display());
    for f in &run.failures {
        eprintln!("failed cell {} seed {}: {}", f.job, f.seed, f.error);
    }
    Ok(())
}

fn print_ablation(run: &ExperimentRun) {
    let mut keys: Vec<(u64, String)> = Vec::new();
    for r in &run.rows {
        let k = (r.seed, r.scene.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (seed, scene) in keys {
        println!("seed {seed} {scene}");
        println!("  arm   psnr     ssim");
        for r in run.rows.iter().filter(|r| r.seed == seed && r.scene == scene) {
            println!("  {:<4} {:>7.3}  {:.4}", r.method, r.psnr, r.ssim);
        }
    }
}

fn print_summary(run: &ExperimentRun) {
    println!("cell,method,psnr,ssim");
    for cell in run.cells() {
        for method in run.methods() {
            if let Some((p, s)) = run.mean_quality(&cell, &method) {
                println!("{cell},{method},{p:.3},{s:.4}");
            }
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn simulate(manifest: &Path, seed: u64, out: &Path) -> CliResult<()> {
    let m = Manifest::load(manifest)?;
    let mut scenes = Vec::new();
    for s in &m.scenes {
        let (latent, _psf, seq) = s.simulate(seed)?;
        let dir = out.join(&s.name);
        std::fs::create_dir_all(&dir)?;
        latent.save_container(dir.join("latent.pn2n"))?;
        seq.latent_blurred.save_container(dir.join("blurred.pn2n"))?;
        seq.true_bias_field.save_container(dir.join("bias.pn2n"))?;
        for (i, f) in seq.frames.iter().enumerate() {
            f.save_container(dir.join(format!("frame_{i:03}.pn2n")))?;
        }
        write_json(
            &dir.join("psf.json"),
            &serde_json::to_value(&s.psf).map_err(Error::from)?,
        )?;
        scenes.push(json!({
            "name": s.name,
            "frames": seq.len(),
            "height": seq.dims().0,
            "width": seq.dims().1,
            "noise": s.noise.label(),
            "frame_seeds": seq.seeds,
        }));
    }
    write_json(
        &out.join("simulation.json"),
        &json!({ "tool": "pn2n", "version": env!("CARGO_PKG_VERSION"), "seed": seed, "scenes": scenes }),
    )?;
    println!("{}", json!({ "out": out, "scenes": m.scenes.len() }));
    Ok(())
}

/// `frame_*` files of a directory in name order.
fn frame_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no frame_* files in {}", dir.display())));
    }
    Ok(files)
}

fn write_trace(path: &Path, trace: &[f64]) -> CliResult<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        text.push_str(&format!("{i},{l:.9e}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn scene_name(dir: &Path, index: usize) -> String {
    dir.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .unwrap_or_else(|| format!("scene{index}"))
}

fn denoise(a: &DenoiseArgs) -> CliResult<()> {
    let rule = match a.pairs {
        PairArg::Adjacent => PairRule::AdjacentPairs,
        PairArg::OddEven => PairRule::OddEvenHalfAverages,
    };
    let mut scenes = Vec::new();
    let mut sets = Vec::new();
    for (i, dir) in a.frames.iter().enumerate() {
        let frames = frame_files(dir)?
            .iter()
            .map(Image::load)
            .collect::<pn2n_core::Result<Vec<_>>>()?;
        sets.push(pair_frames(&frames, rule, i as u64)?);
        scenes.push((scene_name(dir, i), frames));
    }
    let pairs = FramePairSet::merge(sets);
    let cfg = Sn2nTrainConfig {
        lambda1: a.lambda1,
        steps: a.steps,
        batch: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
    };
    let mut model = match &a.pretrained {
        Some(p) => pretrain_finetune(&Checkpoint::load(p)?, &pairs, &cfg)?,
        None => train_denoiser(&pairs, &UNetSpec::denoiser(a.base), &cfg)?,
    };
    std::fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    for (name, frames) in &scenes {
        let dir = a.out.join(name);
        std::fs::create_dir_all(&dir)?;
        let refs: Vec<&Image> = frames.iter().collect();
        let den = denoise_all(&mut model, &refs)?;
        for (i, d) in den.iter().enumerate() {
            d.save_container(dir.join(format!("denoised_{i:03}.pn2n")))?;
        }
        let y = Image::average(&den)?;
        y.save_container(dir.join("y_prime.pn2n"))?;
        outputs.push(dir.join("y_prime.pn2n"));
    }
    model.checkpoint().save(a.out.join("denoiser.ckpt"))?;
    write_trace(&a.out.join("denoiser_loss.csv"), &model.trace)?;
    write_json(
        &a.out.join("denoise.json"),
        &json!({
            "pairs": pairs.len(),
            "config": cfg,
            "pretrained": a.pretrained,
            "final_loss": model.trace.last(),
            "outputs": outputs,
        }),
    )?;
    println!("{}", json!({ "out": a.out, "y_prime": outputs }));
    Ok(())
}

fn parse_psf(arg: &str, grid: (usize, usize)) -> CliResult<Psf> {
    let spec = if Path::new(arg).is_file() {
        serde_json::from_slice::<PsfSpec>(&std::fs::read(arg)?).map_err(Error::from)?
    } else {
        PsfSpec::Label(arg.to_string())
    };
    Ok(spec.build(grid)?)
}

fn deblur(a: &DeblurArgs) -> CliResult<()> {
    let inputs = a
        .inputs
        .iter()
        .map(Image::load)
        .collect::<pn2n_core::Result<Vec<_>>>()?;
    let psf = parse_psf(&a.psf, inputs[0].dims())?;
    std::fs::create_dir_all(&a.out)?;
    let stem = |p: &PathBuf, i: usize| {
        let s = p.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
        let parent = p.parent().and_then(|d| d.file_name()).and_then(|d| d.to_str());
        match parent {
            Some(d) if a.inputs.len() > 1 => format!("{d}_{s}"),
            _ if a.inputs.len() > 1 => format!("{s}_{i}"),
            _ => s.to_string(),
        }
    };
    let method = match a.method {
        MethodArg::Wd => Some(ClassicalMethod::Wd),
        MethodArg::Lra => Some(ClassicalMethod::Lra),
        MethodArg::Nlr => Some(ClassicalMethod::Nlr),
        MethodArg::Pn2n => None,
    };
    let mut written = Vec::new();
    let mut meta = json!({});
    match method {
        Some(m) => {
            let params = DeconvParams {
                wiener_k: a.wiener_k,
                rl_iterations: a.rl_iterations,
                nlr_iterations: a.nlr_iterations,
                nlr_alpha: a.nlr_alpha,
                nlr_beta: a.nlr_beta,
            };
            let problems = params.validate();
            if !problems.is_empty() {
                return Err(Error::InvalidConfig(problems).into());
            }
            let mut flags = Vec::new();
            for (i, (p, y)) in a.inputs.iter().zip(&inputs).enumerate() {
                let o = run_classical(m, y, &psf, &params)?;
                let path = a.out.join(format!("{}_{}.pn2n", stem(p, i), m.label().to_lowercase()));
                o.image.save_container(&path)?;
                o.image.save_png16(path.with_extension("png"))?;
                flags.push(json!({
                    "unstable": o.unstable, "clipped_input": o.clipped_input,
                    "diverged": o.diverged, "iterations": o.iterations,
                }));
                written.push(path);
            }
            meta = json!({ "params": params, "outputs": flags });
        }
        None => {
            let cfg = DeblurTrainConfig {
                lambda2: a.lambda2,
                bias_lr: a.bias_lr,
                net_lr: a.net_lr,
                steps: a.steps,
                batch: 0,
                regularization_enabled: !a.no_reg,
                freeze_bias: a.freeze_bias,
                cosine_decay: !a.constant_lr,
                seed: a.seed,
            };
            let mut model = train_deblur(&inputs, &psf, &UNetSpec::deblur(a.base), &cfg)?;
            for (i, (p, y)) in a.inputs.iter().zip(&inputs).enumerate() {
                let x = reconstruct(&mut model, y)?;
                let path = a.out.join(format!("{}_pn2n.pn2n", stem(p, i)));
                x.save_container(&path)?;
                x.save_png16(path.with_extension("png"))?;
                written.push(path);
            }
            let bias = model.bias.to_image()?;
            bias.save_container(a.out.join(format!("{BIAS_TENSOR}.pn2n")))?;
            model.checkpoint().save(a.out.join("deblur.ckpt"))?;
            write_trace(&a.out.join("deblur_loss.csv"), &model.trace)?;
            meta = json!({ "config": cfg, "bias_mean": bias.mean(), "final_loss": model.trace.last() });
        }
    }
    let label = match a.method {
        MethodArg::Wd => "wd",
        MethodArg::Lra => "lra",
        MethodArg::Nlr => "nlr",
        MethodArg::Pn2n => "pn2n",
    };
    write_json(
        &a.out.join("deblur.json"),
        &json!({ "method": label, "psf": a.psf, "inputs": a.inputs, "written": written, "details": meta }),
    )?;
    println!("{}", json!({ "method": label, "written": written }));
    Ok(())
}
