use log::warn;

use crate::color::RgbImage;
use crate::error::{Error, Result};

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;
const GAUSS_SIZE: usize = 11;
const GAUSS_SIGMA: f64 = 1.5;
const UQI_WINDOW: usize = 8;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// A single-channel `f64` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::LengthMismatch(data.len(), width * height));
        }
        Ok(Self { width, height, data })
    }

    pub fn luma(img: &RgbImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.luminance(),
        }
    }

    /// 2× reduction by averaging 2×2 blocks; a trailing odd row/column is dropped.
    pub fn downsample(&self) -> Self {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.data[(2 * y + dy) * self.width + 2 * x + dx];
                data.push((at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) / 4.0);
            }
        }
        Self { width: w, height: h, data }
    }

    fn min_dim(&self) -> usize {
        self.width.min(self.height)
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let c = (GAUSS_SIZE / 2) as f64;
    let k: Vec<f64> = (0..GAUSS_SIZE)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable weighted window sum over all fully contained window positions.
fn filter_valid(data: &[f64], width: usize, height: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (width + 1 - n, height + 1 - n);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let src = &data[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Local first and second moments under a window.
struct Moments {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn moments(a: &Plane, b: &Plane, k: &[f64]) -> Moments {
    let f = |d: &[f64]| filter_valid(d, a.width, a.height, k).0;
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = f(&a.data);
    let mu_b = f(&b.data);
    let aa = f(&prod(&a.data, &a.data));
    let bb = f(&prod(&b.data, &b.data));
    let ab = f(&prod(&a.data, &b.data));
    let var_a = aa.iter().zip(&mu_a).map(|(s, m)| s - m * m).collect();
    let var_b = bb.iter().zip(&mu_b).map(|(s, m)| s - m * m).collect();
    let cov = ab.iter().zip(mu_a.iter().zip(&mu_b)).map(|(s, (x, y))| s - x * y).collect();
    Moments {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

fn check_pair(a: &Plane, b: &Plane, min: usize) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    if a.min_dim() < min {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            min,
        });
    }
    Ok(())
}

/// Mean luminance term × contrast-structure term, and the mean contrast-structure term alone.
fn ssim_terms(a: &Plane, b: &Plane) -> (f64, f64) {
    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let m = moments(a, b, &gaussian_kernel());
    let n = m.mu_a.len() as f64;
    let mut full = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..m.mu_a.len() {
        let (x, y) = (m.mu_a[i], m.mu_b[i]);
        let lum = (2.0 * x * y + c1) / (x * x + y * y + c1);
        let cs = (2.0 * m.cov[i] + c2) / (m.var_a[i] + m.var_b[i] + c2);
        full += lum * cs;
        cs_sum += cs;
    }
    (full / n, cs_sum / n)
}

pub(crate) fn ssim_plane(a: &Plane, b: &Plane) -> Result<f64> {
    check_pair(a, b, GAUSS_SIZE)?;
    Ok(ssim_terms(a, b).0)
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged over valid windows.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ssim_plane(&Plane::luma(a), &Plane::luma(b))
}

/// MS-SSIM value with the number of pyramid levels actually evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsim {
    pub value: f64,
    pub scales: usize,
    /// Fewer than five levels fit; the weights were renormalized.
    pub reduced: bool,
}

pub(crate) fn ms_ssim_plane(a: &Plane, b: &Plane) -> Result<MsSsim> {
    check_pair(a, b, GAUSS_SIZE)?;
    // the published weights sum to 1.0001; exponents are divided by their sum below
    debug_assert!((MS_SSIM_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-3);
    let mut scales = 1;
    while scales < MS_SSIM_WEIGHTS.len() && a.min_dim() >> scales >= GAUSS_SIZE {
        scales += 1;
    }
    let reduced = scales < MS_SSIM_WEIGHTS.len();
    if reduced {
        warn!(
            "MS-SSIM: {}x{} supports {} of {} scales; weights renormalized",
            a.width,
            a.height,
            scales,
            MS_SSIM_WEIGHTS.len()
        );
    }
    let weight_sum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut value = 1.0;
    for (level, w) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (full, cs) = ssim_terms(&x, &y);
        let term = if level + 1 == scales { full } else { cs };
        // negative contrast-structure would make the fractional power undefined
        value *= term.max(0.0).powf(w / weight_sum);
        if level + 1 < scales {
            x = x.downsample();
            y = y.downsample();
        }
    }
    Ok(MsSsim { value, scales, reduced })
}

pub fn ms_ssim_detailed(a: &RgbImage, b: &RgbImage) -> Result<MsSsim> {
    ms_ssim_plane(&Plane::luma(a), &Plane::luma(b))
}

/// Five-scale structural similarity; small images use fewer scales.
pub fn ms_ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(ms_ssim_detailed(a, b)?.value)
}

/// UQI value with the number of windows skipped for a zero denominator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uqi {
    pub value: f64,
    pub windows: usize,
    pub skipped: usize,
}

pub(crate) fn uqi_plane(a: &Plane, b: &Plane) -> Result<Uqi> {
    check_pair(a, b, UQI_WINDOW)?;
    let k = vec![1.0 / UQI_WINDOW as f64; UQI_WINDOW];
    let m = moments(a, b, &k);
    let mut sum = 0.0;
    let mut used = 0usize;
    for i in 0..m.mu_a.len() {
        let (x, y) = (m.mu_a[i], m.mu_b[i]);
        let denom = (m.var_a[i] + m.var_b[i]) * (x * x + y * y);
        if denom == 0.0 {
            continue;
        }
        sum += 4.0 * m.cov[i] * x * y / denom;
        used += 1;
    }
    if used == 0 {
        return Err(Error::AllWindowsDegenerate);
    }
    Ok(Uqi {
        value: sum / used as f64,
        windows: m.mu_a.len(),
        skipped: m.mu_a.len() - used,
    })
}

pub fn uqi_detailed(a: &RgbImage, b: &RgbImage) -> Result<Uqi> {
    uqi_plane(&Plane::luma(a), &Plane::luma(b))
}

/// Universal quality index over 8×8 uniform windows.
pub fn uqi(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(uqi_detailed(a, b)?.value)
}
