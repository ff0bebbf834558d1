//! Step 2: a physics-guided deblurring U-Net with a learnable per-pixel bias
//! field shared by every input.
//!
//! The network sees `y′ − b` and outputs `x̂ ∈ (0, 1)`. The loss compares
//! `PSF ⊗ x̂` with the bias-corrected observation, plus an optional term
//! tying it to the raw observation:
//!
//! `mean((H x̂ − y′ + b)²) + λ₂·mean((H x̂ − y′)²)`
//!
//! summed over all inputs. Network weights and the bias are updated jointly
//! with separate Adam learning rates.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::apply_transfer;
use crate::image::Image;
use crate::nn::{stack_images, unstack_image, Adam, Checkpoint, Param, Tensor, UNet, UNetSpec};
use crate::psf::Psf;
use crate::rng::SeedTree;

pub const CHECKPOINT_KIND: &str = "deblur";
pub const BIAS_TENSOR: &str = "bias_field";

/// One learnable offset per pixel, shared across all frames and scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    values: Array2<f64>,
}

impl BiasField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            values: img.pixels().clone(),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    /// Root-mean-square value.
    pub fn rms(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    pub fn to_image(&self) -> Result<Image> {
        Image::new(self.values.clone())
    }
}

/// `H x̂ − y′`, the residual against the raw observation.
fn residual(x_hat: &Array2<f64>, y_prime: &Array2<f64>, psf: &Psf) -> Array2<f64> {
    apply_transfer(x_hat, psf.otf(), false) - y_prime
}

fn check_dims(x_hat: &Image, y_prime: &Image, b: &BiasField, psf: &Psf) -> Result<()> {
    x_hat.ensure_same_dims(y_prime)?;
    if b.dims() != y_prime.dims() {
        return Err(Error::DimensionMismatch {
            expected: y_prime.dims(),
            actual: b.dims(),
        });
    }
    if psf.grid() != y_prime.dims() {
        return Err(Error::OtfSizeMismatch {
            otf: psf.grid(),
            image: y_prime.dims(),
        });
    }
    Ok(())
}

/// Loss value and its gradients with respect to `x̂` and `b`, from the raw
/// residual `r = H x̂ − y′`.
fn loss_and_grads(r: &Array2<f64>, b: &Array2<f64>, psf: &Psf, lambda2: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let n = r.len() as f64;
    let mut loss = 0.0;
    let mut g_hx = Array2::zeros(r.dim());
    let mut g_b = Array2::zeros(r.dim());
    ndarray::Zip::from(&mut g_hx)
        .and(&mut g_b)
        .and(r)
        .and(b)
        .for_each(|gh, gb, &rv, &bv| {
            let c = rv + bv;
            loss += c * c + lambda2 * rv * rv;
            *gb = 2.0 * c / n;
            *gh = 2.0 * (c + lambda2 * rv) / n;
        });
    let g_x = apply_transfer(&g_hx, psf.otf(), true);
    (loss / n, g_x, g_b)
}

/// `mean((PSF ⊗ x̂ − y′ + b)²) + λ₂·mean((PSF ⊗ x̂ − y′)²)`. Pass `λ₂ = 0`
/// for the unregularized objective.
pub fn deblur_loss(x_hat: &Image, y_prime: &Image, b: &BiasField, psf: &Psf, lambda2: f64) -> Result<f64> {
    check_dims(x_hat, y_prime, b, psf)?;
    let r = residual(x_hat.pixels(), y_prime.pixels(), psf);
    Ok(loss_and_grads(&r, &b.values, psf, lambda2).0)
}

/// Gradients of [`deblur_loss`] with respect to `x̂` and `b`.
pub fn deblur_loss_grad(
    x_hat: &Image,
    y_prime: &Image,
    b: &BiasField,
    psf: &Psf,
    lambda2: f64,
) -> Result<(Image, Image)> {
    check_dims(x_hat, y_prime, b, psf)?;
    let r = residual(x_hat.pixels(), y_prime.pixels(), psf);
    let (_, gx, gb) = loss_and_grads(&r, &b.values, psf, lambda2);
    Ok((Image::new(gx)?, Image::new(gb)?))
}

/// Closed-form minimizer of `mean((r + b)²) + λ₂·mean(b²)` over `b`, where
/// `r = PSF ⊗ x̂ − y′`: `b* = −r / (1 + λ₂)`.
///
/// The second term is what the regularizer becomes once the reconstruction
/// reproduces its corrected input (`PSF ⊗ x̂ = y′ − b`), so this shows how
/// λ₂ shrinks the bias toward zero.
pub fn regularized_bias_optimum(x_hat: &Image, y_prime: &Image, psf: &Psf, lambda2: f64) -> Result<BiasField> {
    check_dims(
        x_hat,
        y_prime,
        &BiasField::zeros(y_prime.height(), y_prime.width()),
        psf,
    )?;
    if !(lambda2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda2 must be >= 0, got {lambda2}")));
    }
    let r = residual(x_hat.pixels(), y_prime.pixels(), psf);
    Ok(BiasField {
        values: r.mapv(|v| -v / (1.0 + lambda2)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeblurTrainConfig {
    pub lambda2: f64,
    pub bias_lr: f64,
    pub net_lr: f64,
    pub steps: usize,
    /// Inputs per step; 0 uses all of them every step.
    pub batch: usize,
    pub regularization_enabled: bool,
    /// Keep the bias at zero (the no-bias ablation).
    pub freeze_bias: bool,
    /// Anneal the network learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for DeblurTrainConfig {
    fn default() -> Self {
        Self {
            lambda2: 0.1,
            bias_lr: 0.01,
            net_lr: 1e-4,
            steps: 1000,
            batch: 0,
            regularization_enabled: true,
            freeze_bias: false,
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl DeblurTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            errs.push(format!("lambda2 must be finite and >= 0, got {}", self.lambda2));
        }
        for (name, v) in [("bias_lr", self.bias_lr), ("net_lr", self.net_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.steps == 0 {
            errs.push("steps must be >= 1".into());
        }
        errs
    }

    /// λ₂ as used by the loss: zero when regularization is disabled.
    pub fn effective_lambda2(&self) -> f64 {
        if self.regularization_enabled {
            self.lambda2
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDeblur {
    pub net: UNet<f32>,
    pub bias: BiasField,
    pub trace: Vec<f64>,
}

impl TrainedDeblur {
    /// Network weights plus the learned bias as a named tensor.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_net(CHECKPOINT_KIND, &self.net);
        ck.push_tensor(BIAS_TENSOR, &self.bias.values.clone().into_dyn());
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
        let bias: ArrayD<f64> = ck.tensor_array(BIAS_TENSOR)?;
        let values = bias
            .into_dimensionality()
            .map_err(|e| Error::Checkpoint(format!("bias tensor: {e}")))?;
        Ok(Self {
            net: ck.to_net()?,
            bias: BiasField { values },
            trace: Vec::new(),
        })
    }
}

fn corrected(y: &Image, b: &Array2<f64>) -> Image {
    Image::new(y.pixels() - b).expect("bias and inputs are finite")
}

/// Jointly learns the network and one bias field for all `y_primes`.
pub fn train_deblur(y_primes: &[Image], psf: &Psf, spec: &UNetSpec, cfg: &DeblurTrainConfig) -> Result<TrainedDeblur> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let first = y_primes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no inputs to deblur".into()))?;
    let (h, w) = first.dims();
    for y in y_primes {
        if y.dims() != (h, w) {
            return Err(Error::DimensionMismatch {
                expected: (h, w),
                actual: y.dims(),
            });
        }
    }
    if psf.grid() != (h, w) {
        return Err(Error::OtfSizeMismatch {
            otf: psf.grid(),
            image: (h, w),
        });
    }
    if y_primes.len() == 1 && !cfg.freeze_bias {
        log::warn!("bias learned from a single input: it can absorb the whole residual");
    }
    let tree = SeedTree::new(cfg.seed);
    let mut net = UNet::<f32>::new(spec, &mut tree.child("deblur-init").rng())?;
    let mut bias = Param::new(BIAS_TENSOR, ArrayD::<f32>::zeros(IxDyn(&[h, w])));
    let mut net_opt = Adam::new(cfg.net_lr);
    let mut bias_opt = Adam::new(cfg.bias_lr);
    let lambda2 = cfg.effective_lambda2();
    let batch = if cfg.batch == 0 {
        y_primes.len()
    } else {
        cfg.batch.min(y_primes.len())
    };
    let mut order_rng = tree.child("deblur-batches").rng();
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cfg.cosine_decay {
            let f = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
            net_opt.lr = cfg.net_lr * f;
        }
        let idx: Vec<usize> = if batch == y_primes.len() {
            (0..batch).collect()
        } else {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch {
                if order.is_empty() {
                    order = (0..y_primes.len()).collect();
                    order.shuffle(&mut order_rng);
                }
                idx.push(order.pop().expect("refilled"));
            }
            idx
        };
        let b: Array2<f64> = bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-D bias")
            .mapv(|v| v as f64);
        let inputs: Vec<Image> = idx.iter().map(|&i| corrected(&y_primes[i], &b)).collect();
        let refs: Vec<&Image> = inputs.iter().collect();
        net.zero_grad();
        bias.zero_grad();
        let x_hat = net.forward(&stack_images::<f32>(&refs), true);
        let mut grad = Tensor::<f32>::zeros(x_hat.raw_dim());
        let mut g_bias = Array2::<f64>::zeros((h, w));
        let mut loss = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            let xk = x_hat
                .index_axis(ndarray::Axis(0), k)
                .index_axis(ndarray::Axis(0), 0)
                .mapv(|v| v as f64);
            let r = residual(&xk, y_primes[i].pixels(), psf);
            let (l, gx, gb) = loss_and_grads(&r, &b, psf, lambda2);
            loss += l;
            grad.index_axis_mut(ndarray::Axis(0), k)
                .index_axis_mut(ndarray::Axis(0), 0)
                .zip_mut_with(&gx, |d, &v| *d = v as f32);
            g_bias += &gb;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                learning_rate: cfg.net_lr,
                detail: format!("deblur loss {loss} (bias learning rate {})", cfg.bias_lr),
            });
        }
        let g_in = net.backward(&grad);
        net_opt.step(&mut net.params_mut());
        if !cfg.freeze_bias {
            // The input is y′ − b, so b also receives minus the input gradient.
            for k in 0..idx.len() {
                let gi = g_in.index_axis(ndarray::Axis(0), k);
                g_bias.zip_mut_with(&gi.index_axis(ndarray::Axis(0), 0), |d, &v| *d -= v as f64);
            }
            bias.grad.zip_mut_with(&g_bias.into_dyn(), |d, &v| *d = v as f32);
            bias_opt.step(&mut [&mut bias]);
        }
        trace.push(loss);
        if step % 100 == 0 {
            log::debug!("deblur step {step}: loss {loss:.6e}");
        }
    }
    let values = bias
        .value
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-D bias")
        .mapv(|v| v as f64);
    Ok(TrainedDeblur {
        net,
        bias: BiasField { values },
        trace,
    })
}

/// `x̂ = R(y′ − b)`, in (0, 1).
pub fn reconstruct(model: &mut TrainedDeblur, y_prime: &Image) -> Result<Image> {
    if model.bias.dims() != y_prime.dims() {
        return Err(Error::DimensionMismatch {
            expected: model.bias.dims(),
            actual: y_prime.dims(),
        });
    }
    let input = corrected(y_prime, &model.bias.values);
    let out = model.net.forward(&stack_images::<f32>(&[&input]), false);
    unstack_image(&out, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{make_psf, synthetic_scene};
    use crate::fourier::convolve;
    use crate::psf::PsfShape;
    use rand::Rng;

    fn rand_img(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Image {
        Image::from_fn(n, n, |_| rng.random_range(lo..hi)).unwrap()
    }

    /// Direct circular convolution, written out.
    fn blur_direct(x: &Image, psf: &Psf) -> Vec<Vec<f64>> {
        let (h, w) = x.dims();
        let k = psf.kernel();
        let (kh, kw) = k.dim();
        let mut out = vec![vec![0.0; w]; h];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, o) in row.iter_mut().enumerate() {
                for a in 0..kh {
                    for c in 0..kw {
                        let ii = (i + h + kh / 2 - a) % h;
                        let jj = (j + w + kw / 2 - c) % w;
                        *o += k[[a, c]] * x.get(ii, jj);
                    }
                }
            }
        }
        out
    }

    fn loss_oracle(x: &Image, y: &Image, b: &BiasField, psf: &Psf, l: f64) -> f64 {
        let hx = blur_direct(x, psf);
        let (h, w) = x.dims();
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                let r = hx[i][j] - y.get(i, j);
                let c = r + b.values()[[i, j]];
                total += c * c + l * r * r;
            }
        }
        total / (h * w) as f64
    }

    fn disk(n: usize) -> Psf {
        make_psf(PsfShape::Disk { radius: 2.0 }, (n, n)).unwrap()
    }

    #[test]
    fn hand_identities() {
        let mut rng = SeedTree::new(1).rng();
        let psf = disk(16);
        let x = rand_img(&mut rng, 16, 0.0, 1.0);
        let y = rand_img(&mut rng, 16, 0.0, 1.0);
        let zero = BiasField::zeros(16, 16);
        let base = deblur_loss(&x, &y, &zero, &psf, 0.0).unwrap();
        let with = deblur_loss(&x, &y, &zero, &psf, 0.3).unwrap();
        assert!((with - 1.3 * base).abs() < 1e-12);
        // PSF ⊗ x̂ = y′ − b exactly.
        let b = BiasField::from_image(&rand_img(&mut rng, 16, -0.1, 0.1));
        let y_exact = convolve(&x, &psf).unwrap().add(&b.to_image().unwrap()).unwrap();
        let l = deblur_loss(&x, &y_exact, &b, &psf, 0.5).unwrap();
        let expect = 0.5 * b.values().iter().map(|v| v * v).sum::<f64>() / 256.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_transcription_and_finite_differences() {
        let mut rng = SeedTree::new(2).rng();
        let psf = disk(8);
        for _ in 0..20 {
            let x = rand_img(&mut rng, 8, 0.0, 1.0);
            let y = rand_img(&mut rng, 8, 0.0, 1.0);
            let b = BiasField::from_image(&rand_img(&mut rng, 8, -0.2, 0.2));
            let l = rng.random_range(0.0..1.0);
            let got = deblur_loss(&x, &y, &b, &psf, l).unwrap();
            assert!((got - loss_oracle(&x, &y, &b, &psf, l)).abs() < 1e-12);
            let (gx, gb) = deblur_loss_grad(&x, &y, &b, &psf, l).unwrap();
            let eps = 1e-6;
            for (i, j) in [(0, 0), (2, 5), (7, 7)] {
                let bump = |img: &Image, d: f64| {
                    let mut p = img.pixels().clone();
                    p[[i, j]] += d;
                    Image::new(p).unwrap()
                };
                let nx = (loss_oracle(&bump(&x, eps), &y, &b, &psf, l) - loss_oracle(&bump(&x, -eps), &y, &b, &psf, l))
                    / (2.0 * eps);
                let bi = b.to_image().unwrap();
                let nb = (loss_oracle(&x, &y, &BiasField::from_image(&bump(&bi, eps)), &psf, l)
                    - loss_oracle(&x, &y, &BiasField::from_image(&bump(&bi, -eps)), &psf, l))
                    / (2.0 * eps);
                assert!(
                    (nx - gx.get(i, j)).abs() <= 1e-4 * nx.abs().max(1e-3),
                    "{nx} vs {}",
                    gx.get(i, j)
                );
                assert!((nb - gb.get(i, j)).abs() <= 1e-4 * nb.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn bias_gradient_identity_without_regularization() {
        let mut rng = SeedTree::new(3).rng();
        let psf = disk(8);
        let x = rand_img(&mut rng, 8, 0.0, 1.0);
        let y = rand_img(&mut rng, 8, 0.0, 1.0);
        let b = BiasField::from_image(&rand_img(&mut rng, 8, -0.2, 0.2));
        let (_, gb) = deblur_loss_grad(&x, &y, &b, &psf, 0.0).unwrap();
        let hx = blur_direct(&x, &psf);
        for i in 0..8 {
            for j in 0..8 {
                let expect = 2.0 * (hx[i][j] - y.get(i, j) + b.values()[[i, j]]) / 64.0;
                assert!((gb.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shrinkage_optimum() {
        let mut rng = SeedTree::new(4).rng();
        let psf = disk(8);
        for _ in 0..20 {
            let x = rand_img(&mut rng, 8, 0.0, 1.0);
            let y = rand_img(&mut rng, 8, 0.0, 1.0);
            let b0 = regularized_bias_optimum(&x, &y, &psf, 0.0).unwrap();
            let b1 = regularized_bias_optimum(&x, &y, &psf, 1.0).unwrap();
            assert!(b1.rms() < b0.rms());
            // b0 zeroes the data term; b1 is a stationary point of the
            // surrogate, so nudging any pixel cannot lower it.
            assert!(deblur_loss(&x, &y, &b0, &psf, 0.0).unwrap() < 1e-20);
            let surrogate = |b: &Array2<f64>| {
                let r = residual(x.pixels(), y.pixels(), &psf);
                ((&r + b).mapv(|v| v * v).sum() + b.mapv(|v| v * v).sum()) / 64.0
            };
            let best = surrogate(b1.values());
            for (i, j) in [(0, 0), (4, 3)] {
                for d in [-1e-3, 1e-3] {
                    let mut p = b1.values().clone();
                    p[[i, j]] += d;
                    assert!(surrogate(&p) > best);
                }
            }
        }
    }

    fn tiny_cfg(steps: usize) -> DeblurTrainConfig {
        DeblurTrainConfig {
            steps,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let psf = disk(32);
        let ys: Vec<Image> = (0..2)
            .map(|s| {
                convolve(&synthetic_scene(32, s).unwrap(), &psf)
                    .unwrap()
                    .offset(0.03)
                    .unwrap()
            })
            .collect();
        let spec = UNetSpec::deblur(2);
        let a = train_deblur(&ys, &psf, &spec, &tiny_cfg(3)).unwrap();
        let b = train_deblur(&ys, &psf, &spec, &tiny_cfg(3)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_ne!(a.bias.rms(), 0.0);
        let frozen = train_deblur(
            &ys,
            &psf,
            &spec,
            &DeblurTrainConfig {
                freeze_bias: true,
                ..tiny_cfg(3)
            },
        )
        .unwrap();
        assert_eq!(frozen.bias.rms(), 0.0);
        let mut back =
            TrainedDeblur::from_checkpoint(&Checkpoint::decode(&a.checkpoint().encode().unwrap()).unwrap()).unwrap();
        let bias_err = (&back.bias.values - &a.bias.values)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(bias_err < 1e-6);
        let out = reconstruct(&mut back, &ys[0]).unwrap();
        assert!(out.pixels().iter().all(|&v| v > 0.0 && v < 1.0));
        let mut orig = a.clone();
        assert_eq!(reconstruct(&mut orig, &ys[0]).unwrap(), out);
    }

    #[test]
    fn zero_bias_reconstruct_is_plain_forward() {
        let psf = disk(32);
        let y = convolve(&synthetic_scene(32, 1).unwrap(), &psf).unwrap();
        let mut m = train_deblur(
            std::slice::from_ref(&y),
            &psf,
            &UNetSpec::deblur(2),
            &DeblurTrainConfig {
                freeze_bias: true,
                ..tiny_cfg(1)
            },
        )
        .unwrap();
        let direct = m.net.forward(&stack_images::<f32>(&[&y]), false);
        assert_eq!(reconstruct(&mut m, &y).unwrap(), unstack_image(&direct, 0).unwrap());
        let mut rng = SeedTree::new(8).rng();
        let noise = rand_img(&mut rng, 32, -5.0, 5.0);
        assert!(reconstruct(&mut m, &noise)
            .unwrap()
            .pixels()
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
        assert!(reconstruct(&mut m, &Image::zeros(16, 16).unwrap()).is_err());
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let cfg = DeblurTrainConfig {
            lambda2: -1.0,
            bias_lr: 0.0,
            net_lr: f64::NAN,
            steps: 0,
            ..Default::default()
        };
        assert_eq!(cfg.validate().len(), 4);
        assert_eq!(
            DeblurTrainConfig {
                regularization_enabled: false,
                ..Default::default()
            }
            .effective_lambda2(),
            0.0
        );
    }
}
