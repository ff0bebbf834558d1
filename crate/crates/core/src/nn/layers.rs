use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};
use rand_distr::{Distribution, StandardNormal};

use super::{Buffer, Param, Real, Tensor};

/// Patch geometry of a strided, zero-padded square-kernel convolution.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Self {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        Self {
            c,
            h,
            w,
            k,
            s,
            p,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// `(c·k·k, ho·wo)` patch matrix of one `(c, h, w)` image.
fn im2col<T: Real>(x: &[T], g: &Geom, out: &mut [T]) {
    let hw = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * hw;
                for oi in 0..g.ho {
                    let dst = &mut out[row + oi * g.wo..row + (oi + 1) * g.wo];
                    let ii = (oi * g.s + ki) as isize - g.p as isize;
                    if ii < 0 || ii >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.s + kj) as isize - g.p as isize;
                        *d = if jj >= 0 && jj < g.w as isize {
                            src[jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patches back into the image.
fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let hw = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * hw;
                for oi in 0..g.ho {
                    let ii = (oi * g.s + ki) as isize - g.p as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oi * g.wo..row + (oi + 1) * g.wo];
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, &v) in src.iter().enumerate() {
                        let jj = (oj * g.s + kj) as isize - g.p as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous matrix")
}

fn view2_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous matrix")
}

fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::cst(std * z)
    })
}

fn standard<T: Real>(t: Tensor<T>) -> Tensor<T> {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

/// `k×k` convolution, stride 1, same padding. Weight `(cout, cin·k·k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cin: usize,
    cout: usize,
    k: usize,
    cols: Vec<Array2<T>>,
    geom: Option<Geom>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                kaiming(&[cout, cin * k * k], cin * k * k, rng),
            ),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))),
            cin,
            cout,
            k,
            cols: Vec::new(),
            geom: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let g = Geom::new(c, h, w, self.k, 1, self.k / 2);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let wmat = self.weight.value.view().into_dimensionality().expect("2-D weight");
        let mut y = Array4::zeros((n, self.cout, g.ho, g.wo));
        self.cols.clear();
        let per_in = c * h * w;
        let per_out = self.cout * g.cols();
        let ys = y.as_slice_mut().expect("fresh array");
        for b in 0..n {
            let mut cols = Array2::zeros((g.rows(), g.cols()));
            im2col(
                &xs[b * per_in..(b + 1) * per_in],
                &g,
                cols.as_slice_mut().expect("fresh"),
            );
            let mut out = view2_mut(&mut ys[b * per_out..(b + 1) * per_out], self.cout, g.cols());
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(self.bias.value.iter()) {
                row.fill(bv);
            }
            general_mat_mul(T::one(), &wmat, &cols, T::one(), &mut out);
            self.cols.push(cols);
        }
        self.geom = Some(g);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.geom.expect("forward before backward");
        let n = dy.dim().0;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let per_out = self.cout * g.cols();
        let mut dx = Array4::zeros((n, g.c, g.h, g.w));
        let per_in = g.c * g.h * g.w;
        let dxs = dx.as_slice_mut().expect("fresh");
        let wmat: ArrayView2<T> = self.weight.value.view().into_dimensionality().expect("2-D weight");
        let mut dw: ArrayViewMut2<T> = self.weight.grad.view_mut().into_dimensionality().expect("2-D weight");
        let mut dcols = Array2::zeros((g.rows(), g.cols()));
        for b in 0..n {
            let d = view2(&dys[b * per_out..(b + 1) * per_out], self.cout, g.cols());
            general_mat_mul(T::one(), &d, &self.cols[b].t(), T::one(), &mut dw);
            for (gb, row) in self.bias.grad.iter_mut().zip(d.axis_iter(Axis(0))) {
                *gb += row.sum();
            }
            general_mat_mul(T::one(), &wmat.t(), &d, T::zero(), &mut dcols);
            col2im(
                dcols.as_slice().expect("fresh"),
                &g,
                &mut dxs[b * per_in..(b + 1) * per_in],
            );
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}

/// 3×3 transposed convolution, stride 2, padding 1, output padding 1: doubles
/// the spatial size. Weight `(cin, cout·9)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cin: usize,
    cout: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> ConvTranspose2d<T> {
    const K: usize = 3;

    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), kaiming(&[cin, cout * 9], cout * 9, rng)),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))),
            cin,
            cout,
            input: None,
        }
    }

    /// Geometry of the stride-2 convolution this layer is the adjoint of.
    fn geom(&self, h: usize, w: usize) -> Geom {
        Geom::new(self.cout, 2 * h, 2 * w, Self::K, 2, 1)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let x = standard(x.clone());
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "transposed conv input channels");
        let g = self.geom(h, w);
        debug_assert_eq!((g.ho, g.wo), (h, w));
        let wmat: ArrayView2<T> = self.weight.value.view().into_dimensionality().expect("2-D weight");
        let mut y = Array4::zeros((n, self.cout, 2 * h, 2 * w));
        let mut cols = Array2::zeros((g.rows(), g.cols()));
        {
            let xs = x.as_slice().expect("standard");
            let ys = y.as_slice_mut().expect("fresh");
            let per_in = c * h * w;
            let per_out = self.cout * 4 * h * w;
            for b in 0..n {
                let xm = view2(&xs[b * per_in..(b + 1) * per_in], c, h * w);
                general_mat_mul(T::one(), &wmat.t(), &xm, T::zero(), &mut cols);
                col2im(
                    cols.as_slice().expect("fresh"),
                    &g,
                    &mut ys[b * per_out..(b + 1) * per_out],
                );
            }
        }
        for mut img in y.axis_iter_mut(Axis(0)) {
            for (mut plane, &bv) in img.axis_iter_mut(Axis(0)).zip(self.bias.value.iter()) {
                plane += bv;
            }
        }
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("forward before backward");
        let (n, c, h, w) = x.dim();
        let g = self.geom(h, w);
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard");
        let xs = x.as_slice().expect("standard");
        let wmat: ArrayView2<T> = self.weight.value.view().into_dimensionality().expect("2-D weight");
        let mut dw: ArrayViewMut2<T> = self.weight.grad.view_mut().into_dimensionality().expect("2-D weight");
        let mut dx = Array4::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh");
        let mut cols = Array2::zeros((g.rows(), g.cols()));
        let per_in = c * h * w;
        let per_out = self.cout * 4 * h * w;
        for b in 0..n {
            let dyb = &dys[b * per_out..(b + 1) * per_out];
            im2col(dyb, &g, cols.as_slice_mut().expect("fresh"));
            let xm = view2(&xs[b * per_in..(b + 1) * per_in], c, h * w);
            general_mat_mul(T::one(), &xm, &cols.t(), T::one(), &mut dw);
            let mut dxm = view2_mut(&mut dxs[b * per_in..(b + 1) * per_in], c, h * w);
            general_mat_mul(T::one(), &wmat, &cols, T::zero(), &mut dxm);
            for (o, gb) in self.bias.grad.iter_mut().enumerate() {
                *gb += dyb[o * 4 * h * w..(o + 1) * 4 * h * w].iter().copied().sum();
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}

/// 2×2 max pooling, stride 2. Input sides must be even.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Vec<usize>,
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max-pool needs even sides, got {h}x{w}");
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard");
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Array4::zeros((n, c, ho, wo));
        self.argmax.clear();
        self.argmax.reserve(n * c * ho * wo);
        for (plane_idx, yp) in y.as_slice_mut().expect("fresh").chunks_mut(ho * wo).enumerate() {
            let base = plane_idx * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let cand = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cand[0];
                    for &q in &cand[1..] {
                        if xs[q] > xs[best] {
                            best = q;
                        }
                    }
                    yp[i * wo + j] = xs[best];
                    self.argmax.push(best);
                }
            }
        }
        self.in_dim = (n, c, h, w);
        y
    }

    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Array4::zeros(self.in_dim);
        let dxs = dx.as_slice_mut().expect("fresh");
        let dy = dy.as_standard_layout();
        for (&idx, &g) in self.argmax.iter().zip(dy.as_slice().expect("standard")) {
            dxs[idx] += g;
        }
        dx
    }
}

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    momentum: f64,
    eps: f64,
    xhat: Option<Tensor<T>>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: ArrayD::zeros(IxDyn(&[channels])),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: ArrayD::ones(IxDyn(&[channels])),
            },
            momentum: 0.1,
            eps: 1e-5,
            xhat: None,
            inv_std: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut y = standard(x.clone());
        if train {
            self.inv_std.clear();
            let mut xhat = y.clone();
            for ch in 0..c {
                let plane = x.index_axis(Axis(1), ch);
                let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / count;
                let var = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / count;
                let inv = 1.0 / (var + self.eps).sqrt();
                let (m, inv_t) = (T::cst(mean), T::cst(inv));
                xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - m) * inv_t);
                self.inv_std.push(inv_t);
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                let mo = self.momentum;
                let rm = &mut self.running_mean.value[ch];
                *rm = T::cst((1.0 - mo) * rm.f64() + mo * mean);
                let rv = &mut self.running_var.value[ch];
                *rv = T::cst((1.0 - mo) * rv.f64() + mo * unbiased);
            }
            for ch in 0..c {
                let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                let src = xhat.index_axis(Axis(1), ch);
                y.index_axis_mut(Axis(1), ch)
                    .zip_mut_with(&src, |o, &v| *o = gm * v + bt);
            }
            self.xhat = Some(xhat);
        } else {
            for ch in 0..c {
                let inv = T::cst(1.0 / (self.running_var.value[ch].f64() + self.eps).sqrt());
                let m = self.running_mean.value[ch];
                let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| gm * (v - m) * inv + bt);
            }
        }
        y
    }

    /// Backward through the training-mode transform.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let xhat = self.xhat.as_ref().expect("training forward before backward");
        let (n, c, h, w) = xhat.dim();
        let count = T::cst((n * h * w) as f64);
        let mut dx = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let d = dy.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_d: T = d.iter().copied().sum();
            let sum_dx: T = d.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            self.gamma.grad[ch] += sum_dx;
            self.beta.grad[ch] += sum_d;
            let k = self.gamma.value[ch] * self.inv_std[ch] / count;
            let mut out = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut out).and(&d).and(&xh).for_each(|o, &dv, &xv| {
                *o = k * (count * dv - sum_d - xv * sum_dx);
            });
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Softplus,
    Sigmoid,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply<T: Real>(&self, v: T) -> T {
        match *self {
            Activation::Identity => v,
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu { slope } => {
                if v > T::zero() {
                    v
                } else {
                    v * T::cst(slope)
                }
            }
            Activation::Softplus => {
                let x = v.f64();
                T::cst(x.max(0.0) + (-x.abs()).exp().ln_1p())
            }
            Activation::Sigmoid => T::cst(sigmoid(v.f64())),
        }
    }

    /// Derivative at input `x` with output `y`.
    pub fn derivative<T: Real>(&self, x: T, y: T) -> T {
        match *self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::cst(slope)
                }
            }
            Activation::Softplus => T::cst(sigmoid(x.f64())),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// An activation layer that remembers its input and output.
#[derive(Debug, Clone)]
pub struct ActLayer<T> {
    pub kind: Activation,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> ActLayer<T> {
    pub fn new(kind: Activation) -> Self {
        Self { kind, cache: None }
    }

    pub fn forward(&mut self, x: Tensor<T>) -> Tensor<T> {
        let kind = self.kind;
        let y = x.mapv(|v| kind.apply(v));
        self.cache = Some((x, y.clone()));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (x, y) = self.cache.as_ref().expect("forward before backward");
        let kind = self.kind;
        let mut dx = dy.to_owned();
        ndarray::Zip::from(&mut dx)
            .and(x)
            .and(y)
            .for_each(|d, &xv, &yv| *d *= kind.derivative(xv, yv));
        dx
    }
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching batch and spatial dims")
}

/// Split a gradient of [`concat`] back into its two parts.
pub fn split<T: Real>(d: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let a = d.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let b = d.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Tensor<f64> {
        Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar objective `Σ r ⊙ f(x)` for a fixed random projection `r`.
    fn check_input_grad(
        mut f: impl FnMut(&Tensor<f64>) -> Tensor<f64>,
        mut back: impl FnMut(&Tensor<f64>) -> Tensor<f64>,
        x: &Tensor<f64>,
        rng: &mut ChaCha8Rng,
    ) {
        let y = f(x);
        let r = rand_tensor(rng, y.dim());
        let dx = back(&r);
        let eps = 1e-6;
        for idx in [0, x.len() / 3, x.len() / 2, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let fp = (&f(&xp) * &r).sum();
            let fm = (&f(&xm) * &r).sum();
            let num = (fp - fm) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                "idx {idx}: {num} vs {ana}"
            );
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, &mut rng);
        conv.bias.value = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1, -0.2, 0.3]).unwrap();
        let x = rand_tensor(&mut rng, (2, 2, 5, 6));
        let y = conv.forward(&x);
        let w = conv.weight.value.clone();
        for (b, o, i, j) in [(0, 0, 0, 0), (1, 2, 4, 5), (0, 1, 2, 3)] {
            let mut acc = conv.bias.value[o];
            for c in 0..2 {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let (ii, jj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                        if (0..5).contains(&ii) && (0..6).contains(&jj) {
                            acc += w[[o, (c * 3 + ki) * 3 + kj]] * x[[b, c, ii as usize, jj as usize]];
                        }
                    }
                }
            }
            assert!((acc - y[[b, o, i, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::<f64>::new("c", 2, 3, 3, &mut rng);
        let x = rand_tensor(&mut rng, (2, 2, 4, 4));
        let mut a = conv.clone();
        let mut b = conv.clone();
        check_input_grad(
            |x| a.forward(x),
            |d| {
                b.forward(&x);
                b.backward(d)
            },
            &x,
            &mut rng,
        );
        // weight gradient
        let mut c = conv.clone();
        let y = c.forward(&x);
        let r = rand_tensor(&mut rng, y.dim());
        c.backward(&r);
        let eps = 1e-6;
        for idx in [0, 7, 20, 53] {
            let mut p = conv.clone();
            p.weight.value.as_slice_mut().unwrap()[idx] += eps;
            let mut m = conv.clone();
            m.weight.value.as_slice_mut().unwrap()[idx] -= eps;
            let num = ((&p.forward(&x) * &r).sum() - (&m.forward(&x) * &r).sum()) / (2.0 * eps);
            let ana = c.weight.grad.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()));
        }
        let num_b: f64 = r.index_axis(Axis(1), 1).sum();
        assert!((c.bias.grad[1] - num_b).abs() < 1e-10);
    }

    #[test]
    fn conv_transpose_doubles_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut up = ConvTranspose2d::<f64>::new("u", 3, 2, &mut rng);
        let x = rand_tensor(&mut rng, (2, 3, 3, 4));
        let y = up.forward(&x);
        assert_eq!(y.dim(), (2, 2, 6, 8));
        let mut a = up.clone();
        let mut b = up.clone();
        check_input_grad(
            |x| a.forward(x),
            |d| {
                b.forward(&x);
                b.backward(d)
            },
            &x,
            &mut rng,
        );
        let r = rand_tensor(&mut rng, y.dim());
        let mut c = up.clone();
        c.forward(&x);
        c.backward(&r);
        let eps = 1e-6;
        for idx in [0, 11, 40] {
            let mut p = up.clone();
            p.weight.value.as_slice_mut().unwrap()[idx] += eps;
            let mut m = up.clone();
            m.weight.value.as_slice_mut().unwrap()[idx] -= eps;
            let num = ((&p.forward(&x) * &r).sum() - (&m.forward(&x) * &r).sum()) / (2.0 * eps);
            assert!((num - c.weight.grad.as_slice().unwrap()[idx]).abs() < 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn conv_transpose_matches_scatter_definition() {
        // out[2i - 1 + ki, 2j - 1 + kj] += w[c, o, ki, kj] · x[c, i, j]
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut up = ConvTranspose2d::<f64>::new("u", 2, 1, &mut rng);
        let x = rand_tensor(&mut rng, (1, 2, 2, 3));
        let y = up.forward(&x);
        let w = up.weight.value.clone();
        let mut expect = Array4::<f64>::zeros((1, 1, 4, 6));
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (oi, oj) = (2 * i as isize - 1 + ki as isize, 2 * j as isize - 1 + kj as isize);
                            if (0..4).contains(&oi) && (0..6).contains(&oj) {
                                expect[[0, 0, oi as usize, oj as usize]] += w[[c, ki * 3 + kj]] * x[[0, c, i, j]];
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_bn_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, (2, 3, 4, 6));
        let mut p1 = MaxPool2::default();
        let mut p2 = MaxPool2::default();
        check_input_grad(
            |x| p1.forward(x),
            |d| {
                p2.forward(&x);
                p2.backward(d)
            },
            &x,
            &mut rng,
        );

        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        bn.gamma.value = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.5, 0.5, -1.0]).unwrap();
        let mut b1 = bn.clone();
        let mut b2 = bn.clone();
        check_input_grad(
            |x| b1.forward(x, true),
            |d| {
                b2.forward(&x, true);
                b2.backward(d)
            },
            &x,
            &mut rng,
        );
        let y = bn.forward(&x, true);
        let ch0 = y.index_axis(Axis(1), 2);
        assert!(ch0.mean().unwrap().abs() < 1e-12);

        for kind in [
            Activation::Relu,
            Activation::LeakyRelu { slope: 0.1 },
            Activation::Softplus,
            Activation::Sigmoid,
        ] {
            let mut a1 = ActLayer::new(kind);
            let mut a2 = ActLayer::new(kind);
            check_input_grad(
                |x| a1.forward(x.clone()),
                |d| {
                    a2.forward(x.clone());
                    a2.backward(d)
                },
                &x,
                &mut rng,
            );
        }
    }
}
