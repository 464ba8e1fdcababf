use log::warn;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::{percentile, StainMatrix};
use crate::color::OdImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MacenkoParams {
    /// Pixels whose optical density is below this in every channel count as background.
    pub od_threshold: f64,
    /// Robust extreme-angle percentile, in percent.
    pub alpha: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            alpha: 1.0,
        }
    }
}

/// Angle (degrees) under which the two recovered directions are reported as one stain.
const DEGENERATE_ANGLE_DEG: f64 = 5.0;

pub(crate) fn tissue_pixels(od: &OdImage, threshold: f64) -> Vec<[f64; 3]> {
    od.pixels().filter(|p| p.iter().any(|v| *v > threshold)).collect()
}

/// Estimates the stain matrix from the plane of the two leading principal directions
/// of the tissue optical densities, taking the robust extreme angles in that plane.
pub fn macenko_estimate_stains(od: &OdImage, params: &MacenkoParams) -> Result<StainMatrix> {
    let tissue = tissue_pixels(od, params.od_threshold);
    if tissue.len() < 2 {
        return Err(Error::InsufficientTissue(tissue.len()));
    }
    let n = tissue.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|i| tissue.iter().map(|p| p[i]).sum::<f64>() / n);
    let mut cov = Matrix3::<f64>::zeros();
    for p in &tissue {
        let d = Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= (n - 1.0).max(1.0);

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut e1: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    let mut e2: Vector3<f64> = eig.eigenvectors.column(order[1]).into_owned();
    // orient the plane so tissue projects onto the positive side of e1
    let m = Vector3::new(mean[0], mean[1], mean[2]);
    if e1.dot(&m) < 0.0 {
        e1 = -e1;
    }
    if e2.sum() < 0.0 {
        e2 = -e2;
    }

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|p| {
            let v = Vector3::new(p[0], p[1], p[2]);
            v.dot(&e2).atan2(v.dot(&e1))
        })
        .collect();
    let lo = percentile(&mut angles, params.alpha);
    let hi = percentile(&mut angles, 100.0 - params.alpha);
    let direction = |phi: f64| {
        let v = e1 * phi.cos() + e2 * phi.sin();
        [v[0], v[1], v[2]]
    };
    let stains = StainMatrix::new(direction(lo), direction(hi))?;
    if stains.angle_between_columns() < DEGENERATE_ANGLE_DEG {
        warn!(
            "Macenko: recovered stains are only {:.2} degrees apart; the tile looks single-stained",
            stains.angle_between_columns()
        );
    }
    Ok(stains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::angle_between_degrees;
    use crate::color::{rgb_to_od, RgbImage};

    #[test]
    fn blank_tile_has_no_tissue() {
        let white = RgbImage::filled(8, 8, [255, 255, 255]).unwrap();
        assert!(matches!(
            macenko_estimate_stains(&rgb_to_od(&white), &MacenkoParams::default()),
            Err(Error::InsufficientTissue(0))
        ));
    }

    #[test]
    fn recovers_noise_free_mixture() {
        let h = [0.65, 0.70, 0.29];
        let e = [0.07, 0.99, 0.11];
        let truth = StainMatrix::new(h, e).unwrap();
        let mut vals = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                let c = [i as f64 / 20.0, j as f64 / 20.0];
                vals.extend(truth.mix(c));
            }
        }
        let od = OdImage::new(40, 40, vals).unwrap();
        let est = macenko_estimate_stains(&od, &MacenkoParams::default()).unwrap();
        for j in 0..2 {
            let err = angle_between_degrees(est.column(j), truth.column(j));
            assert!(err < 2.0, "column {j}: {err} degrees");
        }
    }
}
