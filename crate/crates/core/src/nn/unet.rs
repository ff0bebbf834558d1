use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use super::layers::{concat, split, ActLayer, Activation, BatchNorm2d, Conv2d, ConvTranspose2d, MaxPool2};
use super::{Buffer, Param, Real, Tensor};
use crate::error::{Error, Result};

/// Architecture of a symmetric U-Net with one input and one output channel.
///
/// Encoder block `i` has `widths[i]` channels and two `kernel×kernel`
/// convolutions; blocks are separated by 2×2 max-pooling. Each decoder level
/// upsamples with a stride-2 transposed convolution, concatenates the
/// matching encoder output and applies two convolutions. A 1×1 convolution
/// and `output_activation` produce the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub batch_norm: bool,
    /// Activation of the first encoder block.
    pub first_activation: Activation,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

pub type DenoiserSpec = UNetSpec;
pub type DeblurSpec = UNetSpec;

impl UNetSpec {
    /// Six encoder levels (`base·[1, 2, 4, 8, 16, 16]`), ReLU, LeakyReLU(0.1)
    /// output, no normalization.
    pub fn denoiser(base: usize) -> Self {
        Self {
            widths: [1, 2, 4, 8, 16, 16].iter().map(|m| m * base).collect(),
            kernel: 3,
            batch_norm: false,
            first_activation: Activation::Relu,
            hidden_activation: Activation::Relu,
            output_activation: Activation::LeakyRelu { slope: 0.1 },
        }
    }

    /// Five encoder levels (`base·[1, 2, 4, 8, 16]`), batch norm after every
    /// convolution, ReLU in the first block and Softplus elsewhere, Sigmoid
    /// output.
    pub fn deblur(base: usize) -> Self {
        Self {
            widths: [1, 2, 4, 8, 16].iter().map(|m| m * base).collect(),
            kernel: 3,
            batch_norm: true,
            first_activation: Activation::Relu,
            hidden_activation: Activation::Softplus,
            output_activation: Activation::Sigmoid,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Input sides must be multiples of this; other sizes are padded.
    pub fn multiple(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.widths.is_empty() {
            v.push("widths: at least one level required".to_string());
        }
        if self.widths.contains(&0) {
            v.push("widths: all widths must be positive".to_string());
        }
        if self.kernel % 2 == 0 {
            v.push(format!("kernel: must be odd, got {}", self.kernel));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Multiply-accumulates of one forward pass on an `h×w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let k2 = (self.kernel * self.kernel) as u64;
        let mut total = 0u64;
        let mut cin = 1u64;
        for (i, &wd) in self.widths.iter().enumerate() {
            let px = ((h >> i) * (w >> i)) as u64;
            total += px * k2 * (cin * wd as u64 + (wd * wd) as u64);
            cin = wd as u64;
        }
        for i in (0..self.levels().saturating_sub(1)).rev() {
            let px = ((h >> i) * (w >> i)) as u64;
            let wd = self.widths[i] as u64;
            let deeper = self.widths[i + 1] as u64;
            total += (px / 4) * 9 * deeper * wd + px * k2 * (2 * wd * wd + wd * wd);
        }
        total + (h * w) as u64 * self.widths[0] as u64
    }
}

#[derive(Debug, Clone)]
struct Block<T> {
    conv1: Conv2d<T>,
    bn1: Option<BatchNorm2d<T>>,
    act1: ActLayer<T>,
    conv2: Conv2d<T>,
    bn2: Option<BatchNorm2d<T>>,
    act2: ActLayer<T>,
}

impl<T: Real> Block<T> {
    fn new(name: &str, cin: usize, cout: usize, spec: &UNetSpec, act: Activation, rng: &mut impl rand::Rng) -> Self {
        let bn = |n: &str| spec.batch_norm.then(|| BatchNorm2d::new(&format!("{name}.{n}"), cout));
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, spec.kernel, rng),
            bn1: bn("bn1"),
            act1: ActLayer::new(act),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, spec.kernel, rng),
            bn2: bn("bn2"),
            act2: ActLayer::new(act),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let mut h = self.conv1.forward(x);
        if let Some(bn) = &mut self.bn1 {
            h = bn.forward(&h, train);
        }
        h = self.act1.forward(h);
        h = self.conv2.forward(&h);
        if let Some(bn) = &mut self.bn2 {
            h = bn.forward(&h, train);
        }
        self.act2.forward(h)
    }

    fn backward(&mut self, d: &Tensor<T>) -> Tensor<T> {
        let mut d = self.act2.backward(d);
        if let Some(bn) = &mut self.bn2 {
            d = bn.backward(&d);
        }
        d = self.conv2.backward(&d);
        d = self.act1.backward(&d);
        if let Some(bn) = &mut self.bn1 {
            d = bn.backward(&d);
        }
        self.conv1.backward(&d)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.params_mut();
        if let Some(bn) = &mut self.bn1 {
            v.extend(bn.params_mut());
        }
        v.extend(self.conv2.params_mut());
        if let Some(bn) = &mut self.bn2 {
            v.extend(bn.params_mut());
        }
        v
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.params();
        if let Some(bn) = &self.bn1 {
            v.extend(bn.params());
        }
        v.extend(self.conv2.params());
        if let Some(bn) = &self.bn2 {
            v.extend(bn.params());
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v = Vec::new();
        for bn in [&mut self.bn1, &mut self.bn2].into_iter().flatten() {
            v.extend(bn.buffers_mut());
        }
        v
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v = Vec::new();
        for bn in [&self.bn1, &self.bn2].into_iter().flatten() {
            v.extend(bn.buffers());
        }
        v
    }
}

fn mirror(i: usize, n: usize) -> usize {
    let m = i % (2 * n);
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Pads bottom/right by mirroring up to `(ph, pw)`.
fn pad_mirror<T: Real>(x: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, ph, pw), |(b, ch, i, j)| x[[b, ch, mirror(i, h), mirror(j, w)]])
}

/// Adjoint of [`pad_mirror`].
fn unpad_mirror<T: Real>(d: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, ph, pw) = d.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..ph {
                for j in 0..pw {
                    out[[b, ch, mirror(i, h), mirror(j, w)]] += d[[b, ch, i, j]];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    spec: UNetSpec,
    enc: Vec<Block<T>>,
    pools: Vec<MaxPool2>,
    ups: Vec<ConvTranspose2d<T>>,
    dec: Vec<Block<T>>,
    head: Conv2d<T>,
    out: ActLayer<T>,
    /// `(h, w)` of the unpadded input of the last forward pass.
    input_dims: Option<(usize, usize)>,
}

impl<T: Real> UNet<T> {
    /// Kaiming-normal weights, zero biases.
    pub fn new(spec: &UNetSpec, rng: &mut impl rand::Rng) -> Result<Self> {
        spec.validate()?;
        let l = spec.levels();
        let mut enc = Vec::with_capacity(l);
        let mut cin = 1;
        for (i, &w) in spec.widths.iter().enumerate() {
            let act = if i == 0 {
                spec.first_activation
            } else {
                spec.hidden_activation
            };
            enc.push(Block::new(&format!("enc{i}"), cin, w, spec, act, rng));
            cin = w;
        }
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for j in 0..l - 1 {
            let level = l - 2 - j;
            let w = spec.widths[level];
            ups.push(ConvTranspose2d::new(
                &format!("up{level}"),
                spec.widths[level + 1],
                w,
                rng,
            ));
            let act = if level == 0 {
                spec.first_activation
            } else {
                spec.hidden_activation
            };
            dec.push(Block::new(&format!("dec{level}"), 2 * w, w, spec, act, rng));
        }
        Ok(Self {
            spec: spec.clone(),
            enc,
            pools: vec![MaxPool2::default(); l - 1],
            ups,
            dec,
            head: Conv2d::new("head", spec.widths[0], 1, 1, rng),
            out: ActLayer::new(spec.output_activation),
            input_dims: None,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    /// Forward pass on `(batch, 1, h, w)`. Sides that are not multiples of
    /// [`UNetSpec::multiple`] are mirror-padded and the output cropped back.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let (_, _, h, w) = x.dim();
        let m = self.spec.multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        self.input_dims = Some((h, w));
        let padded;
        let x = if (ph, pw) != (h, w) {
            padded = pad_mirror(x, ph, pw);
            &padded
        } else {
            x
        };
        let l = self.spec.levels();
        let mut skips = Vec::with_capacity(l - 1);
        let mut hcur = self.enc[0].forward(x, train);
        for i in 1..l {
            let pooled = self.pools[i - 1].forward(&hcur);
            skips.push(hcur);
            hcur = self.enc[i].forward(&pooled, train);
        }
        for j in 0..l - 1 {
            let up = self.ups[j].forward(&hcur);
            let skip = skips.pop().expect("one skip per level");
            hcur = self.dec[j].forward(&concat(&up, &skip), train);
        }
        let y = self.out.forward(self.head.forward(&hcur));
        if (ph, pw) != (h, w) {
            y.slice(s![.., .., ..h, ..w]).to_owned()
        } else {
            y
        }
    }

    /// Backpropagates `dy` through the last training-mode forward pass,
    /// accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (h, w) = self.input_dims.expect("forward before backward");
        let m = self.spec.multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let dy = if (ph, pw) != (h, w) {
            let (n, c, _, _) = dy.dim();
            let mut full = Array4::zeros((n, c, ph, pw));
            full.slice_mut(s![.., .., ..h, ..w]).assign(dy);
            full
        } else {
            dy.to_owned()
        };
        let l = self.spec.levels();
        let mut d = self.head.backward(&self.out.backward(&dy));
        let mut dskips = Vec::with_capacity(l - 1);
        for j in (0..l - 1).rev() {
            let dcat = self.dec[j].backward(&d);
            let up_ch = self.spec.widths[l - 2 - j];
            let (dup, dskip) = split(&dcat, up_ch);
            d = self.ups[j].backward(&dup);
            dskips.push(dskip);
        }
        // dskips[k] now belongs to encoder level k.
        for i in (0..l).rev() {
            d = self.enc[i].backward(&d);
            if i > 0 {
                d = self.pools[i - 1].backward(&d);
                d += &dskips[i - 1];
            }
        }
        if (ph, pw) != (h, w) {
            unpad_mirror(&d, h, w)
        } else {
            d
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for b in &mut self.enc {
            v.extend(b.params_mut());
        }
        for (u, b) in self.ups.iter_mut().zip(&mut self.dec) {
            v.extend(u.params_mut());
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for b in &self.enc {
            v.extend(b.params());
        }
        for (u, b) in self.ups.iter().zip(&self.dec) {
            v.extend(u.params());
            v.extend(b.params());
        }
        v.extend(self.head.params());
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v = Vec::new();
        for b in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            v.extend(b.buffers_mut());
        }
        v
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v = Vec::new();
        for b in self.enc.iter().chain(self.dec.iter()) {
            v.extend(b.buffers());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn input(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeedTree::new(seed).rng();
        Array4::from_shape_fn((n, 1, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn output_dims_follow_input() {
        let mut net = UNet::<f32>::new(&UNetSpec::denoiser(2), &mut SeedTree::new(1).rng()).unwrap();
        for side in [32, 48, 64, 96] {
            let x = Array4::<f32>::from_elem((1, 1, side, side), 0.5);
            assert_eq!(net.forward(&x, false).dim(), (1, 1, side, side));
        }
        let x = Array4::<f32>::from_elem((2, 1, 40, 24), 0.5);
        assert_eq!(net.forward(&x, true).dim(), (2, 1, 40, 24));
    }

    fn check_net_grads(spec: &UNetSpec, h: usize, w: usize) {
        let mut net = UNet::<f64>::new(spec, &mut SeedTree::new(2).rng()).unwrap();
        // Zero biases leave pre-activations of all-zero patches exactly on the
        // ReLU kink, where central differences are one-sided.
        let mut rng = SeedTree::new(7).rng();
        for p in net.params_mut() {
            if p.name.ends_with(".bias") {
                p.value.mapv_inplace(|_| rng.random_range(-0.1..0.1));
            }
        }
        let x = input(2, h, w, 3);
        let y = net.forward(&x, true);
        let r = input(2, h, w, 4).mapv(|v| v - 0.5);
        assert_eq!(y.dim(), r.dim());
        net.zero_grad();
        let dx = net.backward(&r);
        let objective = |net: &mut UNet<f64>, x: &Tensor<f64>| (&net.forward(x, true) * &r).sum();
        let eps = 1e-6;
        let mut probe = net.clone();
        for idx in [0, 17, h * w / 2 + 3, 2 * h * w - 1] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let num = (objective(&mut probe, &xp) - objective(&mut probe, &xm)) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= 1e-4 * num.abs().max(1e-3),
                "input {idx}: {num} vs {ana}"
            );
        }
        let grads: Vec<(String, f64)> = net
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.grad.as_slice().unwrap()[0]))
            .collect();
        for (pi, (name, ana)) in grads.iter().enumerate() {
            let mut plus = probe.clone();
            plus.params_mut()[pi].value.as_slice_mut().unwrap()[0] += eps;
            let mut minus = probe.clone();
            minus.params_mut()[pi].value.as_slice_mut().unwrap()[0] -= eps;
            let num = (objective(&mut plus, &x) - objective(&mut minus, &x)) / (2.0 * eps);
            assert!(
                (num - ana).abs() <= 1e-4 * num.abs().max(1e-3),
                "{name}: {num} vs {ana}"
            );
        }
    }

    #[test]
    fn deblur_network_gradients() {
        check_net_grads(&UNetSpec::deblur(2), 16, 16);
    }

    #[test]
    fn denoiser_network_gradients_with_padding() {
        let mut spec = UNetSpec::denoiser(2);
        spec.widths.truncate(3);
        check_net_grads(&spec, 10, 12);
    }

    #[test]
    fn eval_mode_is_deterministic_and_bounded() {
        let mut net = UNet::<f32>::new(&UNetSpec::deblur(2), &mut SeedTree::new(5).rng()).unwrap();
        let x = input(1, 16, 16, 6).mapv(|v| v as f32 * 10.0 - 5.0);
        let a = net.forward(&x, false);
        assert_eq!(a, net.forward(&x, false));
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
