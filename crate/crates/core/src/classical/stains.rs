use std::fmt::Write as _;

use log::warn;

use super::percentile;
use crate::color::{od_to_rgb, OdImage, RgbImage};
use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-6;
const MIN_STAIN_ANGLE_DEG: f64 = 1.0;

/// Two unit-norm, nonnegative optical-density stain vectors, hematoxylin-like first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StainMatrix {
    columns: [[f64; 3]; 2],
}

fn norm(v: &[f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Angle between two 3-vectors in degrees.
pub fn angle_between_degrees(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

fn to_unit_nonnegative(v: [f64; 3]) -> Result<[f64; 3]> {
    let flipped = if v.iter().sum::<f64>() < 0.0 { v.map(|x| -x) } else { v };
    let clipped = flipped.map(|x| x.max(0.0));
    let n = norm(&clipped);
    if !n.is_finite() || n == 0.0 {
        return Err(Error::InvalidArgument(format!("stain vector {v:?} has no positive direction")));
    }
    Ok(clipped.map(|x| x / n))
}

impl StainMatrix {
    /// Normalizes both vectors and orders them so the larger blue component comes first.
    pub fn new(a: [f64; 3], b: [f64; 3]) -> Result<Self> {
        let (a, b) = (to_unit_nonnegative(a)?, to_unit_nonnegative(b)?);
        let columns = if a[2] >= b[2] { [a, b] } else { [b, a] };
        Ok(Self { columns })
    }

    pub fn column(&self, j: usize) -> &[f64; 3] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[[f64; 3]; 2] {
        &self.columns
    }

    pub fn angle_between_columns(&self) -> f64 {
        angle_between_degrees(&self.columns[0], &self.columns[1])
    }

    /// OD contributed by concentrations `c`.
    pub fn mix(&self, c: [f64; 2]) -> [f64; 3] {
        std::array::from_fn(|i| self.columns[0][i] * c[0] + self.columns[1][i] * c[1])
    }

    /// Row-major 3×2 text with six decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..3 {
            let _ = writeln!(out, "{:.6} {:.6}", self.columns[0][i], self.columns[1][i]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("bad stain value {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if values.len() != 6 {
            return Err(Error::Format(format!("stain matrix needs 6 values, got {}", values.len())));
        }
        let a = [values[0], values[2], values[4]];
        let b = [values[1], values[3], values[5]];
        for v in [&a, &b] {
            if (norm(v) - 1.0).abs() > 1e-5 || v.iter().any(|x| *x < 0.0) {
                return Err(Error::Format(format!("stain column {v:?} is not a nonnegative unit vector")));
            }
        }
        Self::new(a, b)
    }

    /// Both columns are nonnegative unit vectors, ordered by blue component.
    pub fn is_valid(&self) -> bool {
        self.columns
            .iter()
            .all(|c| (norm(c) - 1.0).abs() <= UNIT_TOLERANCE && c.iter().all(|x| *x >= 0.0))
            && self.columns[0][2] >= self.columns[1][2]
    }
}

/// Per-pixel nonnegative stain concentrations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationMap {
    width: usize,
    height: usize,
    values: Vec<[f64; 2]>,
}

impl ConcentrationMap {
    pub fn new(width: usize, height: usize, values: Vec<[f64; 2]>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::LengthMismatch(values.len(), width * height));
        }
        if values.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("concentrations must be finite and nonnegative".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    /// Per-stain percentile over all pixels.
    pub fn percentiles(&self, q: f64) -> [f64; 2] {
        std::array::from_fn(|j| {
            let mut col: Vec<f64> = self.values.iter().map(|c| c[j]).collect();
            percentile(&mut col, q)
        })
    }

    pub fn scaled(&self, factors: [f64; 2]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|c| [c[0] * factors[0], c[1] * factors[1]]).collect(),
        }
    }
}

/// Per-stain multiplicative factors applied to concentrations before recombination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcentrationScale {
    pub ratios: [f64; 2],
}

impl ConcentrationScale {
    pub const IDENTITY: Self = Self { ratios: [1.0, 1.0] };

    /// Ratios that map the source's percentile onto the target's. A blank source channel keeps ratio 1.
    pub fn matching(source: [f64; 2], target: [f64; 2]) -> Self {
        let ratios = std::array::from_fn(|j| {
            if source[j] > 0.0 {
                target[j] / source[j]
            } else {
                warn!("stain channel {j} is blank in the source; leaving its scale at 1");
                1.0
            }
        });
        Self { ratios }
    }
}

/// Solves `min ‖od − W c‖²` over `c ≥ 0` for two stains exactly.
fn nnls2(stains: &StainMatrix, od: [f64; 3], gram: [[f64; 2]; 2], det: f64) -> [f64; 2] {
    let [a, b] = stains.columns();
    let (ya, yb) = (dot(a, &od), dot(b, &od));
    let free = [(gram[1][1] * ya - gram[0][1] * yb) / det, (gram[0][0] * yb - gram[0][1] * ya) / det];
    if free[0] >= 0.0 && free[1] >= 0.0 {
        return free;
    }
    let residual = |c: [f64; 2]| {
        let m = stains.mix(c);
        (0..3).map(|i| (od[i] - m[i]).powi(2)).sum::<f64>()
    };
    let candidates = [
        [0.0, 0.0],
        [(ya / gram[0][0]).max(0.0), 0.0],
        [0.0, (yb / gram[1][1]).max(0.0)],
    ];
    candidates
        .into_iter()
        .min_by(|x, y| residual(*x).total_cmp(&residual(*y)))
        .unwrap_or([0.0, 0.0])
}

/// Per-pixel nonnegative least-squares unmixing of `od` into the two stains.
pub fn compute_concentrations(od: &OdImage, stains: &StainMatrix) -> Result<ConcentrationMap> {
    let angle = stains.angle_between_columns();
    if angle <= MIN_STAIN_ANGLE_DEG {
        return Err(Error::ParallelStains(angle));
    }
    let [a, b] = stains.columns();
    let gram = [[dot(a, a), dot(a, b)], [dot(a, b), dot(b, b)]];
    let det = gram[0][0] * gram[1][1] - gram[0][1] * gram[0][1];
    let values = od.pixels().map(|p| nnls2(stains, p, gram, det)).collect();
    ConcentrationMap::new(od.width(), od.height(), values)
}

/// Rebuilds an RGB image from (rescaled) concentrations and a target stain matrix.
pub fn recombine(conc: &ConcentrationMap, target_stains: &StainMatrix, scale: ConcentrationScale) -> Result<RgbImage> {
    let values: Vec<f64> = conc
        .values
        .iter()
        .flat_map(|c| target_stains.mix([c[0] * scale.ratios[0], c[1] * scale.ratios[1]]))
        .collect();
    od_to_rgb(&OdImage::new(conc.width, conc.height, values)?)
}
