//! RGB images and the color statistics built on them.

mod histogram;
mod lab;
pub(crate) mod od;
mod template;
mod wasserstein;

pub use histogram::{compute_histogram, mean_histogram, ColorHistogram, HistogramMode};
pub use lab::{lab_to_rgb, rgb_to_lab, Lab};
pub use od::{od_to_rgb, rgb_to_od, OdImage, OD_BACKGROUND};
pub use template::{select_template, select_template_detailed, TemplateSelection};
pub use wasserstein::{histogram_distance, wasserstein_1d};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of histogram bins per channel.
pub const DEFAULT_BINS: usize = 256;

/// An 8-bit RGB image stored row-major as interleaved triples.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::LengthMismatch(pixels.len(), width * height * 3));
        }
        Ok(Self { width, height, pixels })
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w×h` rectangle whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Self::new(w, h, pixels)
    }

    /// Rec. 601 luma, `0.299 R + 0.587 G + 0.114 B`, row-major.
    pub fn luminance(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// `(1, 3, H, W)` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.pixel_count();
        let mut data = vec![0.0f32; plane * 3];
        for (i, p) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p[c] as f32 / 255.0;
            }
        }
        Tensor::from_parts(vec![1, 3, self.height, self.width], data)
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding and clamping to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::InvalidShape(format!("expected (1, 3, H, W), got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let plane = h * w;
        let d = t.data();
        let mut pixels = vec![0u8; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                pixels[i * 3 + c] = (d[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        Self::new(w, h, pixels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::from(e).at(path))?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    /// Writes the image; the encoding follows the file extension (PNG for `.png`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::Format("pixel buffer does not match dimensions".into()))?;
        buf.save(path).map_err(|e| Error::from(e).at(path))
    }

    /// Mean absolute difference per channel value, in intensity levels.
    pub fn mean_abs_diff(&self, other: &RgbImage) -> f64 {
        let total: u64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs() as u64)
            .sum();
        total as f64 / self.pixels.len() as f64
    }

    /// Largest absolute difference of any channel value.
    pub fn max_abs_diff(&self, other: &RgbImage) -> u8 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| a.abs_diff(b))
            .max()
            .unwrap_or(0)
    }
}
