use log::warn;

use super::macenko::tissue_pixels;
use super::StainMatrix;
use crate::color::OdImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct VahadaneParams {
    pub lambda: f64,
    pub od_threshold: f64,
    pub max_iterations: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tolerance: f64,
}

impl Default for VahadaneParams {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            od_threshold: 0.15,
            max_iterations: 50,
            tolerance: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VahadaneReport {
    pub stains: StainMatrix,
    /// Objective after each outer iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// Hematoxylin / eosin reference directions used to seed the dictionary.
const SEED_STAINS: [[f64; 3]; 2] = [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11]];

type Dictionary = [[f64; 3]; 2];

fn mix(w: &Dictionary, h: [f64; 2]) -> [f64; 3] {
    std::array::from_fn(|i| w[0][i] * h[0] + w[1][i] * h[1])
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pixel_cost(w: &Dictionary, v: &[f64; 3], h: [f64; 2], lambda: f64) -> f64 {
    let m = mix(w, h);
    (0..3).map(|i| (v[i] - m[i]).powi(2)).sum::<f64>() + lambda * (h[0] + h[1])
}

/// `‖V − W·H‖²_F + λ‖H‖₁` over the given pixels.
pub fn vahadane_objective(pixels: &[[f64; 3]], w: &[[f64; 3]; 2], h: &[[f64; 2]], lambda: f64) -> f64 {
    pixels.iter().zip(h).map(|(v, c)| pixel_cost(w, v, *c, lambda)).sum()
}

/// Exact minimizer of `‖v − W h‖² + λ(h₁ + h₂)` over `h ≥ 0`.
fn sparse_code(w: &Dictionary, v: &[f64; 3], lambda: f64) -> [f64; 2] {
    let g00 = dot(&w[0], &w[0]);
    let g11 = dot(&w[1], &w[1]);
    let g01 = dot(&w[0], &w[1]);
    let r0 = dot(&w[0], v) - lambda / 2.0;
    let r1 = dot(&w[1], v) - lambda / 2.0;
    let mut candidates = vec![[0.0, 0.0], [(r0 / g00).max(0.0), 0.0], [0.0, (r1 / g11).max(0.0)]];
    let det = g00 * g11 - g01 * g01;
    if det > 1e-12 {
        let both = [(g11 * r0 - g01 * r1) / det, (g00 * r1 - g01 * r0) / det];
        if both[0] >= 0.0 && both[1] >= 0.0 {
            candidates.push(both);
        }
    }
    candidates
        .into_iter()
        .min_by(|a, b| pixel_cost(w, v, *a, lambda).total_cmp(&pixel_cost(w, v, *b, lambda)))
        .unwrap_or([0.0, 0.0])
}

/// Exact update of one dictionary atom on the nonnegative unit sphere, others fixed.
fn update_atom(w: &mut Dictionary, j: usize, pixels: &[[f64; 3]], h: &[[f64; 2]]) {
    let other = 1 - j;
    let mut u = [0.0f64; 3];
    for (v, c) in pixels.iter().zip(h) {
        for i in 0..3 {
            u[i] += (v[i] - w[other][i] * c[other]) * c[j];
        }
    }
    let pos = u.map(|x| x.max(0.0));
    let n = pos.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        w[j] = pos.map(|x| x / n);
    } else if h.iter().any(|c| c[j] > 0.0) {
        // every direction is uphill: the best unit vector is the least-bad axis
        let best = (0..3).max_by(|&a, &b| u[a].total_cmp(&u[b])).unwrap_or(0);
        w[j] = [0.0; 3];
        w[j][best] = 1.0;
    }
}

/// Sparse nonnegative factorization of tissue optical densities into two unit stain atoms.
///
/// Alternates an exact per-pixel sparse coding step with exact per-atom dictionary
/// updates constrained to nonnegative unit vectors, so the objective never increases.
pub fn vahadane_estimate_stains(od: &OdImage, params: &VahadaneParams) -> Result<VahadaneReport> {
    let pixels = tissue_pixels(od, params.od_threshold);
    if pixels.len() < 2 {
        return Err(Error::InsufficientTissue(pixels.len()));
    }
    let mut w: Dictionary = SEED_STAINS.map(|v| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.map(|x| x / n)
    });
    let mut h: Vec<[f64; 2]> = pixels.iter().map(|v| sparse_code(&w, v, params.lambda)).collect();
    let mut objective = Vec::with_capacity(params.max_iterations);
    let mut previous = vahadane_objective(&pixels, &w, &h, params.lambda);
    let mut converged = false;
    for _ in 0..params.max_iterations {
        update_atom(&mut w, 0, &pixels, &h);
        update_atom(&mut w, 1, &pixels, &h);
        for (c, v) in h.iter_mut().zip(&pixels) {
            *c = sparse_code(&w, v, params.lambda);
        }
        let current = vahadane_objective(&pixels, &w, &h, params.lambda);
        objective.push(current);
        let decrease = (previous - current) / previous.max(f64::MIN_POSITIVE);
        previous = current;
        if decrease.abs() < params.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "Vahadane: no convergence within {} iterations; returning the last iterate",
            params.max_iterations
        );
    }
    Ok(VahadaneReport {
        stains: StainMatrix::new(w[0], w[1])?,
        objective,
        converged,
    })
}
