//! Grayscale intensity images and their on-disk formats.
//!
//! Two formats are supported: 8/16-bit grayscale PNG and a raw float
//! container. The container is a 16-byte header (`PN2NIMG1`, then height and
//! width as little-endian `u32`) followed by row-major little-endian `f32`
//! samples. Values are stored unclipped, so noisy frames survive a round trip
//! with their out-of-range samples intact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 8] = b"PN2NIMG1";
const HEADER_LEN: usize = 16;

/// A 2-D grayscale intensity field, nominally in `[0, 1]`.
///
/// Samples may leave `[0, 1]` after noise is added; [`Image::clamp01`]
/// produces a clipped copy and records that in [`Image::is_clamped`].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array2<f64>,
    clamped: bool,
}

impl Image {
    /// Smallest accepted side length; the deepest U-Net path halves a side
    /// three times.
    pub const MIN_SIDE: usize = 8;

    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (height, width) = pixels.dim();
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return Err(Error::ImageTooSmall {
                height,
                width,
                min: Self::MIN_SIDE,
            });
        }
        if let Some(((row, col), _)) = pixels.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self { pixels, clamped: false })
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> f64) -> Result<Self> {
        Self::new(Array2::from_shape_fn((height, width), f))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn is_clamped(&self) -> bool {
        self.clamped
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[[row, col]]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Copy clipped to `[0, 1]`.
    pub fn clamp01(&self) -> Image {
        Image {
            pixels: self.pixels.mapv(|v| v.clamp(0.0, 1.0)),
            clamped: true,
        }
    }

    /// Elementwise map. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Result<Image> {
        Image::new(self.pixels.mapv(f))
    }

    pub fn zip_map(&self, other: &Image, mut f: impl FnMut(f64, f64) -> f64) -> Result<Image> {
        self.ensure_same_dims(other)?;
        let mut out = self.pixels.clone();
        out.zip_mut_with(&other.pixels, |a, &b| *a = f(*a, b));
        Image::new(out)
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<Image> {
        self.map(|v| v * factor)
    }

    pub fn offset(&self, delta: f64) -> Result<Image> {
        self.map(|v| v + delta)
    }

    /// Pixelwise mean of a non-empty set of equally sized images.
    pub fn average(images: &[Image]) -> Result<Image> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot average zero images".into()))?;
        let mut acc = Array2::<f64>::zeros(first.dims());
        for img in images {
            first.ensure_same_dims(img)?;
            acc += &img.pixels;
        }
        acc /= images.len() as f64;
        Image::new(acc)
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Load a PNG (8/16-bit grayscale) or a float container, chosen by the
    /// file's leading bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let bytes = fs::read(path.as_ref())?;
        if bytes.starts_with(CONTAINER_MAGIC) {
            return Self::decode_container(&bytes);
        }
        let decoded = image::load_from_memory(&bytes)?;
        match decoded {
            image::DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                Image::from_fn(h as usize, w as usize, |(r, c)| {
                    f64::from(buf.get_pixel(c as u32, r as u32).0[0]) / 255.0
                })
            }
            image::DynamicImage::ImageLuma16(buf) => {
                let (w, h) = buf.dimensions();
                Image::from_fn(h as usize, w as usize, |(r, c)| {
                    f64::from(buf.get_pixel(c as u32, r as u32).0[0]) / 65535.0
                })
            }
            other => Err(Error::UnsupportedFormat(format!(
                "{:?}; expected 8- or 16-bit grayscale",
                other.color()
            ))),
        }
    }

    /// Write as 8-bit grayscale PNG. Values are clipped to `[0, 1]` and
    /// rounded to the nearest level.
    pub fn save_png8(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = self.dims();
        let buf = image::GrayImage::from_fn(w as u32, h as u32, |c, r| {
            image::Luma([quantize(self.pixels[[r as usize, c as usize]], 255.0) as u8])
        });
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Write as 16-bit grayscale PNG.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = self.dims();
        let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |c, r| {
            image::Luma([quantize(self.pixels[[r as usize, c as usize]], 65535.0) as u16])
        });
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Write the raw float container. Samples are narrowed to `f32`.
    pub fn save_container(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(&self.encode_container())?;
        out.flush()?;
        Ok(())
    }

    /// Save by extension: `.png` writes 8-bit PNG, anything else gets the
    /// float container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => self.save_png8(path),
            _ => self.save_container(path),
        }
    }

    pub fn encode_container(&self) -> Vec<u8> {
        let (h, w) = self.dims();
        let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * h * w);
        bytes.extend_from_slice(CONTAINER_MAGIC);
        bytes.extend_from_slice(&(h as u32).to_le_bytes());
        bytes.extend_from_slice(&(w as u32).to_le_bytes());
        for &v in self.pixels.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        bytes
    }

    pub fn decode_container(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != CONTAINER_MAGIC {
            return Err(Error::MalformedContainer("missing PN2NIMG1 header".into()));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * h * w {
            return Err(Error::MalformedContainer(format!(
                "header says {h}x{w} ({} bytes) but body has {} bytes",
                4 * h * w,
                body.len()
            )));
        }
        let data: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let pixels = Array2::from_shape_vec((h, w), data).map_err(|e| Error::MalformedContainer(e.to_string()))?;
        Image::new(pixels)
    }
}

fn quantize(v: f64, levels: f64) -> f64 {
    (v.clamp(0.0, 1.0) * levels).round()
}
