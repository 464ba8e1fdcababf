//! Independent reference implementations used by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stainkit::classical::StainMatrix;
use stainkit::color::{OdImage, RgbImage};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

/// Per-channel pixel tallies, counted one pixel at a time.
pub fn tally(img: &RgbImage, bins: usize) -> [Vec<u64>; 3] {
    let width = 256 / bins;
    let mut out = [vec![0u64; bins], vec![0u64; bins], vec![0u64; bins]];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.get(x, y);
            for c in 0..3 {
                out[c][p[c] as usize / width] += 1;
            }
        }
    }
    out
}

/// Template choice by exhaustive scan in exact integer arithmetic.
///
/// All images have `P` pixels, so every normalized CDF is an integer over `P`
/// and the mean CDF an integer over `N·P`; distances are compared scaled by `N·P`.
pub fn template_argmin(images: &[RgbImage], bins: usize) -> usize {
    let n = images.len() as i128;
    let cdfs: Vec<[Vec<i128>; 3]> = images
        .iter()
        .map(|img| {
            tally(img, bins).map(|ch| {
                ch.iter()
                    .scan(0i128, |acc, &v| {
                        *acc += v as i128;
                        Some(*acc)
                    })
                    .collect()
            })
        })
        .collect();
    let sum: [Vec<i128>; 3] =
        std::array::from_fn(|c| (0..bins).map(|i| cdfs.iter().map(|cdf| cdf[c][i]).sum()).collect());
    let scaled: Vec<i128> = cdfs
        .iter()
        .map(|cdf| (0..3).map(|c| (0..bins).map(|i| (n * cdf[c][i] - sum[c][i]).abs()).sum::<i128>()).sum())
        .collect();
    let best = *scaled.iter().min().unwrap();
    scaled.iter().position(|&d| d == best).unwrap()
}

/// Minimum transport cost between two distributions on `0..B` with ground cost `|i − j|`,
/// solved as a linear program over the `B×B` coupling.
pub fn transport_lp(p: &[f64], q: &[f64]) -> f64 {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let b = p.len();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let x: Vec<Vec<minilp::Variable>> = (0..b)
        .map(|i| (0..b).map(|j| lp.add_var(i.abs_diff(j) as f64, (0.0, f64::INFINITY))).collect())
        .collect();
    for i in 0..b {
        let row: Vec<_> = (0..b).map(|j| (x[i][j], 1.0)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Eq, p[i]);
    }
    for j in 0..b {
        let col: Vec<_> = (0..b).map(|i| (x[i][j], 1.0)).collect();
        lp.add_constraint(col.as_slice(), ComparisonOp::Eq, q[j]);
    }
    lp.solve().expect("transport problem is feasible").objective()
}

pub fn random_distribution(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len)
        .map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    if v.iter().all(|&e| e == 0.0) {
        v[rng.gen_range(0..len)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|e| *e /= s);
    v
}

/// Index of the nearest row by exhaustive squared-distance scan in f64, lowest index on ties.
pub fn nearest_row(v: &[f32], table: &[f32]) -> usize {
    let d = v.len();
    let dist = |row: &[f32]| row.iter().zip(v).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>();
    let mut best = 0;
    for (i, row) in table.chunks_exact(d).enumerate() {
        if dist(row) < dist(&table[best * d..(best + 1) * d]) {
            best = i;
        }
    }
    best
}

/// Expected tile grid along one axis from rectangle arithmetic: `None` when retain mode cannot fit a tile.
pub fn expected_offsets(extent: usize, tile: usize, retain: bool) -> Option<Vec<usize>> {
    let full = extent / tile;
    let mut v: Vec<usize> = (0..full).map(|i| i * tile).collect();
    if retain && !extent.is_multiple_of(tile) {
        if extent < tile {
            return None;
        }
        v.push(extent - tile);
    }
    Some(v)
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|e| e / n)
}

/// Planted stain pair: hematoxylin-like and eosin-like directions jittered per seed.
pub fn planted_stains(rng: &mut impl Rng) -> StainMatrix {
    let mut jitter = |v: [f64; 3]| normalize3(v.map(|e: f64| (e + rng.gen_range(-0.06..0.06)).max(0.01)));
    let h = jitter([0.65, 0.70, 0.29]);
    let e = jitter([0.07, 0.99, 0.11]);
    StainMatrix::new(h, e).unwrap()
}

/// `size×size` OD image of two-stain mixtures: `single` of the pixels carry one
/// stain only, the rest both; Gaussian noise of deviation `sigma` is added per channel.
pub fn two_stain_od(stains: &StainMatrix, size: usize, single: f64, sigma: f64, rng: &mut impl Rng) -> OdImage {
    let mut values = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        let c = if rng.gen_bool(single) {
            let amount = rng.gen_range(0.4..1.5);
            if rng.gen_bool(0.5) {
                [amount, 0.0]
            } else {
                [0.0, amount]
            }
        } else {
            [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
        };
        let od = stains.mix(c);
        for ch in od {
            values.push((ch + sigma * normal(rng)).max(0.0));
        }
    }
    OdImage::new(size, size, values).unwrap()
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Coefficient of determination of the least-squares line `y ≈ a·x + b`.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let resid: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    1.0 - resid / syy
}

/// SSIM of two constant images: only the luminance term survives.
pub fn constant_ssim(mu1: f64, mu2: f64) -> f64 {
    let c1 = (0.01f64 * 255.0).powi(2);
    (2.0 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1)
}

/// Adds seeded Gaussian noise of deviation `sigma` levels to every channel, with clamping.
pub fn noisy(img: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let mut out = img.clone();
    for v in out.pixels_mut() {
        *v = (*v as f64 + sigma * normal(&mut r)).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Smooth textured test image.
pub fn textured(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let (fx, fy, ph): (f64, f64, f64) = (r.gen_range(0.1..0.3), r.gen_range(0.1..0.3), r.gen_range(0.0..6.0));
    RgbImage::from_fn(w, h, |x, y| {
        let v = ((x as f64 * fx + ph).sin() * (y as f64 * fy).cos() + 1.0) * 0.5;
        let g = (((x + y) as f64 * 0.07).sin() + 1.0) * 0.5;
        [(40.0 + 180.0 * v) as u8, (60.0 + 150.0 * g) as u8, (90.0 + 120.0 * v * g) as u8]
    })
    .unwrap()
}

/// Largest angle (degrees) between a planted stain column and its recovered counterpart,
/// over `seeds` synthetic two-stain tiles of 64×64 with 80% single-stain pixels and noise `sigma`.
pub fn worst_recovery_angle(
    seeds: std::ops::Range<u64>,
    sigma: f64,
    estimate: impl Fn(&OdImage) -> StainMatrix,
) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut r = rng(seed);
        let planted = planted_stains(&mut r);
        let od = two_stain_od(&planted, 64, 0.8, sigma, &mut r);
        let got = estimate(&od);
        for j in 0..2 {
            worst = worst.max(stainkit::classical::angle_between_degrees(got.column(j), planted.column(j)));
        }
    }
    worst
}

/// Tissue-like RGB tile rendered from planted stains.
pub fn tissue_tile(stains: &StainMatrix, size: usize, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let od = two_stain_od(stains, size, 0.8, 0.01, &mut r);
    stainkit::color::od_to_rgb(&od).unwrap()
}

/// Rec. 601 luma per pixel.
pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// SSIM by direct evaluation of every fully contained 11×11 Gaussian window (σ = 1.5).
pub fn ssim_naive(a: &RgbImage, b: &RgbImage) -> f64 {
    let (w, h) = (a.width(), a.height());
    let (la, lb) = (luma(a), luma(b));
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let wt = g[dy] * g[dx] / norm;
                    let (p, q) = (la[(y0 + dy) * w + x0 + dx], lb[(y0 + dy) * w + x0 + dx]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Copy of `img` shifted right by `dx` pixels, edge column repeated.
pub fn shifted(img: &RgbImage, dx: usize) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| img.get(x.saturating_sub(dx), y)).unwrap()
}
