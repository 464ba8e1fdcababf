//! Classical stain normalizers: Reinhard color statistics transfer, and
//! Macenko / Vahadane stain-matrix estimation with concentration recombination.

mod macenko;
mod reinhard;
mod stains;
mod vahadane;

pub use macenko::{macenko_estimate_stains, MacenkoParams};
pub use reinhard::{reinhard_normalize, LabStats};
pub use stains::{
    angle_between_degrees, compute_concentrations, recombine, ConcentrationMap, ConcentrationScale, StainMatrix,
};
pub use vahadane::{vahadane_estimate_stains, vahadane_objective, VahadaneParams, VahadaneReport};

use serde::{Deserialize, Serialize};

use crate::color::{rgb_to_od, RgbImage};
use crate::error::Result;

/// The three classical methods, usable interchangeably.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassicalMethod {
    Reinhard,
    Macenko,
    Vahadane,
}

impl ClassicalMethod {
    /// Normalizes `src` toward the appearance of `template`.
    pub fn normalize(self, src: &RgbImage, template: &RgbImage) -> Result<RgbImage> {
        TemplateStats::fit(self, template)?.apply(src)
    }
}

/// Target statistics extracted once from a template and reused for every tile.
#[derive(Clone, Debug)]
pub enum TemplateStats {
    Reinhard(LabStats),
    Stains {
        method: ClassicalMethod,
        stains: StainMatrix,
        /// 99th percentile of each template concentration channel.
        reference_max: [f64; 2],
    },
}

pub(crate) const CONCENTRATION_PERCENTILE: f64 = 99.0;

fn estimate(method: ClassicalMethod, img: &RgbImage) -> Result<StainMatrix> {
    let od = rgb_to_od(img);
    match method {
        ClassicalMethod::Macenko => macenko_estimate_stains(&od, &MacenkoParams::default()),
        ClassicalMethod::Vahadane => Ok(vahadane_estimate_stains(&od, &VahadaneParams::default())?.stains),
        ClassicalMethod::Reinhard => unreachable!("Reinhard has no stain matrix"),
    }
}

impl TemplateStats {
    pub fn fit(method: ClassicalMethod, template: &RgbImage) -> Result<Self> {
        if method == ClassicalMethod::Reinhard {
            return Ok(TemplateStats::Reinhard(LabStats::from_image(template)));
        }
        let stains = estimate(method, template)?;
        let conc = compute_concentrations(&rgb_to_od(template), &stains)?;
        Ok(TemplateStats::Stains {
            method,
            stains,
            reference_max: conc.percentiles(CONCENTRATION_PERCENTILE),
        })
    }

    pub fn apply(&self, src: &RgbImage) -> Result<RgbImage> {
        match self {
            TemplateStats::Reinhard(stats) => Ok(reinhard_normalize(src, stats)),
            TemplateStats::Stains {
                method,
                stains,
                reference_max,
            } => {
                let source_stains = estimate(*method, src)?;
                let conc = compute_concentrations(&rgb_to_od(src), &source_stains)?;
                let scale = ConcentrationScale::matching(conc.percentiles(CONCENTRATION_PERCENTILE), *reference_max);
                recombine(&conc, stains, scale)
            }
        }
    }
}

/// Percentile with linear interpolation between order statistics; sorts `values` in place.
pub(crate) fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = (q / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}
