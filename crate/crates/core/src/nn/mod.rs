//! Minimal convolutional network toolkit: layers with hand-written backward
//! passes, a configurable U-Net, Adam, and a checkpoint format.
//!
//! Everything is generic over [`Real`] so training runs in `f32` while
//! gradient checks run in `f64`.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod unet;

use ndarray::{Array4, ArrayD};

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use layers::Activation;
pub use unet::{UNet, UNetSpec};

/// Batch of images, `(batch, channels, height, width)`.
pub type Tensor<T> = Array4<T>;

pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cst(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn cst(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// A named non-trainable tensor (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// Stacks same-sized images into a `(n, 1, h, w)` tensor.
pub fn stack_images<T: Real>(images: &[&crate::Image]) -> Tensor<T> {
    let (h, w) = images[0].dims();
    let mut t = Tensor::zeros((images.len(), 1, h, w));
    for (mut slot, img) in t.outer_iter_mut().zip(images) {
        assert_eq!(img.dims(), (h, w), "stacked images must share dims");
        slot.index_axis_mut(ndarray::Axis(0), 0)
            .zip_mut_with(img.pixels(), |d, &v| *d = T::cst(v));
    }
    t
}

/// Image `i` of a `(n, 1, h, w)` tensor.
pub fn unstack_image<T: Real>(t: &Tensor<T>, i: usize) -> crate::Result<crate::Image> {
    let plane = t.index_axis(ndarray::Axis(0), i);
    let plane = plane.index_axis(ndarray::Axis(0), 0);
    crate::Image::new(plane.mapv(|v| v.f64()))
}
