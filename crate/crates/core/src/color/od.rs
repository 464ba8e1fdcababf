use super::RgbImage;
use crate::error::{Error, Result};

/// Incident light intensity `I₀` of the Beer–Lambert transform.
pub const OD_BACKGROUND: f64 = 256.0;

/// Optical density image: three nonnegative values per pixel, `−log₁₀((I + 1) / 256)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OdImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl OdImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height * 3 {
            return Err(Error::LengthMismatch(values.len(), width * height * 3));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("OdImage::new"));
        }
        Ok(Self {
            width,
            height,
            values: values.into_iter().map(|v| v.max(0.0)).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, i: usize) -> [f64; 3] {
        [self.values[3 * i], self.values[3 * i + 1], self.values[3 * i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.values.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[inline]
pub(crate) fn intensity_to_od(v: u8) -> f64 {
    -((v as f64 + 1.0) / OD_BACKGROUND).log10()
}

#[inline]
pub(crate) fn od_to_intensity(od: f64) -> u8 {
    (OD_BACKGROUND * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_od(img: &RgbImage) -> OdImage {
    OdImage {
        width: img.width(),
        height: img.height(),
        values: img.pixels().iter().map(|&v| intensity_to_od(v)).collect(),
    }
}

pub fn od_to_rgb(od: &OdImage) -> Result<RgbImage> {
    RgbImage::new(od.width, od.height, od.values.iter().map(|&v| od_to_intensity(v)).collect())
}
