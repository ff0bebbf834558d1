//! Step 1: a U-Net denoiser trained on pairs of independent noisy frames of
//! the same scene, with a consistency term tying the two predictions.
//!
//! The denoiser removes the zero-mean part of the noise. The shared bias
//! survives, so its output is `PSF ⊗ x + μ`, which is what the deblurring
//! stage consumes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::degradation::FrameSequence;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{stack_images, unstack_image, Adam, Checkpoint, Real, Tensor, UNet, UNetSpec};
use crate::rng::SeedTree;

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRule {
    /// `(frame 2i, frame 2i+1)` for every `i`.
    #[default]
    AdjacentPairs,
    /// A single pair: mean of the odd frames, mean of the even frames.
    OddEvenHalfAverages,
}

/// Where a group of pairs came from: the seed of the sequence's first frame
/// and the split rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSource {
    pub sequence: u64,
    pub rule: PairRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePairSet {
    pub pairs: Vec<(Image, Image)>,
    pub provenance: Vec<PairSource>,
}

impl FramePairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pools pair sets from several sequences.
    pub fn merge(sets: impl IntoIterator<Item = FramePairSet>) -> FramePairSet {
        let mut out = FramePairSet {
            pairs: Vec::new(),
            provenance: Vec::new(),
        };
        for s in sets {
            out.pairs.extend(s.pairs);
            out.provenance.extend(s.provenance);
        }
        out
    }

    /// The first `n` pairs.
    pub fn truncated(&self, n: usize) -> FramePairSet {
        FramePairSet {
            pairs: self.pairs.iter().take(n).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }
}

pub fn make_pairs(seq: &FrameSequence, rule: PairRule) -> Result<FramePairSet> {
    pair_frames(&seq.frames, rule, seq.seeds.first().copied().unwrap_or(0))
}

/// Pairs loose frames of one scene; `sequence` identifies them in the provenance.
pub fn pair_frames(frames: &[Image], rule: PairRule, sequence: u64) -> Result<FramePairSet> {
    let n = frames.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 frames to pair, got {n}"
        )));
    }
    if n % 2 != 0 {
        return Err(Error::InvalidArgument(format!("frame count must be even, got {n}")));
    }
    let pairs = match rule {
        PairRule::AdjacentPairs => frames.chunks_exact(2).map(|c| (c[0].clone(), c[1].clone())).collect(),
        PairRule::OddEvenHalfAverages => {
            // Frames are numbered from 1, so index 0 is the first odd frame.
            let odd: Vec<Image> = frames.iter().step_by(2).cloned().collect();
            let even: Vec<Image> = frames.iter().skip(1).step_by(2).cloned().collect();
            vec![(Image::average(&odd)?, Image::average(&even)?)]
        }
    };
    Ok(FramePairSet {
        pairs,
        provenance: vec![PairSource { sequence, rule }],
    })
}

/// `mean(f1−y2)² + mean(f2−y1)² + λ₁·mean(f1−f2)²` over flat slices, and its
/// gradients with respect to `f1` and `f2`.
pub fn sn2n_terms<T: Real>(f1: &[T], f2: &[T], y1: &[T], y2: &[T], lambda1: f64) -> (f64, Vec<T>, Vec<T>) {
    let n = f1.len() as f64;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    let mut g1 = Vec::with_capacity(f1.len());
    let mut g2 = Vec::with_capacity(f1.len());
    let s = 2.0 / n;
    for i in 0..f1.len() {
        let (p, q) = (f1[i].f64(), f2[i].f64());
        let (r1, r2, d) = (p - y2[i].f64(), q - y1[i].f64(), p - q);
        a += r1 * r1;
        b += r2 * r2;
        c += d * d;
        g1.push(T::cst(s * (r1 + lambda1 * d)));
        g2.push(T::cst(s * (r2 - lambda1 * d)));
    }
    ((a + b + lambda1 * c) / n, g1, g2)
}

pub fn sn2n_loss(f_y1: &Image, f_y2: &Image, y1: &Image, y2: &Image, lambda1: f64) -> Result<f64> {
    for other in [f_y2, y1, y2] {
        f_y1.ensure_same_dims(other)?;
    }
    let flat = |img: &Image| img.pixels().iter().copied().collect::<Vec<f64>>();
    Ok(sn2n_terms(&flat(f_y1), &flat(f_y2), &flat(y1), &flat(y2), lambda1).0)
}

/// Gradients of [`sn2n_loss`] with respect to `f_y1` and `f_y2`.
pub fn sn2n_loss_grad(f_y1: &Image, f_y2: &Image, y1: &Image, y2: &Image, lambda1: f64) -> Result<(Image, Image)> {
    for other in [f_y2, y1, y2] {
        f_y1.ensure_same_dims(other)?;
    }
    let flat = |img: &Image| img.pixels().iter().copied().collect::<Vec<f64>>();
    let (_, g1, g2) = sn2n_terms(&flat(f_y1), &flat(f_y2), &flat(y1), &flat(y2), lambda1);
    let (h, w) = f_y1.dims();
    let to_img = |g: Vec<f64>| Image::new(ndarray::Array2::from_shape_vec((h, w), g).expect("same length"));
    Ok((to_img(g1)?, to_img(g2)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sn2nTrainConfig {
    pub lambda1: f64,
    pub steps: usize,
    /// Pairs per step.
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for Sn2nTrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            steps: 1000,
            batch: 4,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl Sn2nTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            errs.push(format!("lambda1 must be finite and >= 0, got {}", self.lambda1));
        }
        if self.steps == 0 {
            errs.push("steps must be >= 1".into());
        }
        if self.batch == 0 {
            errs.push("batch must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        errs
    }
}

/// A trained denoiser and the per-step training loss.
#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub net: UNet<f32>,
    pub trace: Vec<f64>,
}

impl TrainedDenoiser {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_net(CHECKPOINT_KIND, &self.net);
        ck.meta = serde_json::json!({ "steps": self.trace.len() });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::IncompatibleArchitecture(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, got {}",
                ck.kind
            )));
        }
        Ok(Self {
            net: ck.to_net()?,
            trace: Vec::new(),
        })
    }
}

pub fn train_denoiser(pairs: &FramePairSet, spec: &UNetSpec, cfg: &Sn2nTrainConfig) -> Result<TrainedDenoiser> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let mut net = UNet::new(spec, &mut SeedTree::new(cfg.seed).child("denoiser-init").rng())?;
    let trace = fit(&mut net, pairs, cfg)?;
    Ok(TrainedDenoiser { net, trace })
}

/// Continues training a pretrained denoiser on a (small) pair set. Zero
/// steps returns the pretrained weights unchanged.
pub fn pretrain_finetune(
    pretrained: &Checkpoint,
    pairs: &FramePairSet,
    cfg: &Sn2nTrainConfig,
) -> Result<TrainedDenoiser> {
    let errs = Sn2nTrainConfig {
        steps: cfg.steps.max(1),
        ..cfg.clone()
    }
    .validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let mut model = TrainedDenoiser::from_checkpoint(pretrained)?;
    model.trace = fit(&mut model.net, pairs, cfg)?;
    Ok(model)
}

fn fit(net: &mut UNet<f32>, pairs: &FramePairSet, cfg: &Sn2nTrainConfig) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let dims = pairs.pairs[0].0.dims();
    for (a, b) in &pairs.pairs {
        if a.dims() != dims || b.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: if a.dims() != dims { a.dims() } else { b.dims() },
            });
        }
    }
    let mut order_rng = SeedTree::new(cfg.seed).child("denoiser-batches").rng();
    let mut order: Vec<usize> = Vec::new();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch.min(pairs.len());
    let per = dims.0 * dims.1;
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut order_rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        // Both members of every pair go through the network as one batch.
        let mut inputs: Vec<&Image> = idx.iter().map(|&i| &pairs.pairs[i].0).collect();
        inputs.extend(idx.iter().map(|&i| &pairs.pairs[i].1));
        let x: Tensor<f32> = stack_images(&inputs);
        net.zero_grad();
        let f = net.forward(&x, true);
        let fs = f.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let mut grad = Tensor::<f32>::zeros(f.raw_dim());
        let gs = grad.as_slice_mut().expect("fresh");
        let mut loss = 0.0;
        let inv = 1.0 / batch as f32;
        for k in 0..batch {
            let (a, b) = (k * per, (k + batch) * per);
            let (l, g1, g2) = sn2n_terms(
                &fs[a..a + per],
                &fs[b..b + per],
                &xs[a..a + per],
                &xs[b..b + per],
                cfg.lambda1,
            );
            loss += l / batch as f64;
            for (d, v) in gs[a..a + per].iter_mut().zip(g1) {
                *d = v * inv;
            }
            for (d, v) in gs[b..b + per].iter_mut().zip(g2) {
                *d = v * inv;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                learning_rate: cfg.learning_rate,
                detail: format!("denoiser loss {loss}"),
            });
        }
        net.backward(&grad);
        opt.step(&mut net.params_mut());
        trace.push(loss);
        if step % 100 == 0 {
            log::debug!("denoiser step {step}: loss {loss:.6e}");
        }
    }
    Ok(trace)
}

/// One forward pass; output dims equal input dims.
pub fn denoise(model: &mut TrainedDenoiser, y: &Image) -> Result<Image> {
    Ok(denoise_all(model, &[y])?.remove(0))
}

pub fn denoise_all(model: &mut TrainedDenoiser, ys: &[&Image]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(ys.len());
    // Small chunks bound the activation memory.
    for chunk in ys.chunks(8) {
        let (h, w) = chunk[0].dims();
        for y in chunk {
            if y.dims() != (h, w) {
                return Err(Error::DimensionMismatch {
                    expected: (h, w),
                    actual: y.dims(),
                });
            }
        }
        let f = model.net.forward(&stack_images::<f32>(chunk), false);
        for i in 0..chunk.len() {
            out.push(unstack_image(&f, i)?);
        }
    }
    Ok(out)
}
