use log::warn;

use crate::color::{lab_to_rgb, rgb_to_lab, Lab, RgbImage};

const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and standard deviation in L*a*b*.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn channels(lab: Lab) -> [f64; 3] {
    [lab.l, lab.a, lab.b]
}

impl LabStats {
    pub fn from_image(img: &RgbImage) -> Self {
        let labs: Vec<[f64; 3]> = img
            .pixels()
            .chunks_exact(3)
            .map(|p| channels(rgb_to_lab([p[0], p[1], p[2]])))
            .collect();
        let n = labs.len() as f64;
        let mean: [f64; 3] = std::array::from_fn(|c| labs.iter().map(|l| l[c]).sum::<f64>() / n);
        let std = std::array::from_fn(|c| {
            let var = labs.iter().map(|l| (l[c] - mean[c]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(STD_FLOOR)
        });
        Self { mean, std }
    }
}

/// Shifts and scales each L*a*b* channel of `src` to the target statistics.
pub fn reinhard_normalize(src: &RgbImage, target: &LabStats) -> RgbImage {
    let source = LabStats::from_image(src);
    let scale: [f64; 3] = std::array::from_fn(|c| {
        if source.std[c] <= STD_FLOOR {
            warn!("Reinhard: source channel {c} has zero variance; leaving its scale at 1");
            1.0
        } else {
            target.std[c] / source.std[c]
        }
    });
    let mut out = src.clone();
    for p in out.pixels_mut().chunks_exact_mut(3) {
        let lab = channels(rgb_to_lab([p[0], p[1], p[2]]));
        let mapped: [f64; 3] = std::array::from_fn(|c| (lab[c] - source.mean[c]) * scale[c] + target.mean[c]);
        let rgb = lab_to_rgb(Lab {
            l: mapped[0],
            a: mapped[1],
            b: mapped[2],
        });
        p.copy_from_slice(&rgb);
    }
    out
}
