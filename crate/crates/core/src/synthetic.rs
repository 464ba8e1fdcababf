//! Seeded generators for tissue-like test tiles.
//!
//! Tiles follow the Beer–Lambert mixing model: nuclei carry only the first
//! (hematoxylin-like) stain, the surrounding stroma only the second, and blob
//! borders mix the two. A second color domain is produced by a fixed nonlinear
//! remap of every pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classical::StainMatrix;
use crate::color::{od::od_to_intensity, OdImage, RgbImage};
use crate::error::Result;

/// Typical hematoxylin and eosin optical-density directions.
pub const HEMATOXYLIN: [f64; 3] = [0.65, 0.70, 0.29];
pub const EOSIN: [f64; 3] = [0.07, 0.99, 0.11];

/// Per-pixel stain concentrations of a generated tile.
#[derive(Clone, Debug)]
pub struct ConcentrationField {
    pub size: usize,
    pub values: Vec<[f64; 2]>,
}

/// Random smooth tissue layout: a few nuclei over a textured stroma with occasional lumen.
pub fn concentration_field(size: usize, seed: u64) -> ConcentrationField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let nuclei: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(4..9))
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(0.05..0.11) * s,
                rng.gen_range(0.7..1.3),
            )
        })
        .collect();
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(1.0..4.0) * std::f64::consts::TAU / s,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::PI),
            )
        })
        .collect();
    let lumen = (rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(0.08..0.2) * s);

    let mut values = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut nucleus: f64 = 0.0;
            let mut amount: f64 = 0.0;
            for &(cx, cy, r, a) in &nuclei {
                let d2 = ((fx - cx).powi(2) + (fy - cy).powi(2)) / (r * r);
                // flat-topped blob with a soft rim
                let m = 1.0 / (1.0 + d2.powi(4));
                if m > nucleus {
                    nucleus = m;
                    amount = a;
                }
            }
            let texture: f64 = waves
                .iter()
                .map(|&(k, phase, dir)| (k * (fx * dir.cos() + fy * dir.sin()) + phase).sin())
                .sum::<f64>()
                / 3.0;
            let ld = ((fx - lumen.0).powi(2) + (fy - lumen.1).powi(2)).sqrt() / lumen.2;
            let open = (ld - 1.0).clamp(0.0, 1.0);
            let stroma = (0.45 + 0.25 * texture) * open;
            values.push([amount * nucleus, stroma * (1.0 - nucleus)]);
        }
    }
    ConcentrationField { size, values }
}

/// Optical densities of a tile mixed from `stains`, with Gaussian noise of std `noise`.
pub fn stained_od(field: &ConcentrationField, stains: &StainMatrix, noise: f64, seed: u64) -> OdImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let values = field
        .values
        .iter()
        .flat_map(|c| stains.mix(*c))
        .map(|v| v + noise * gaussian(&mut rng))
        .collect();
    OdImage::new(field.size, field.size, values).expect("generated optical density is finite")
}

/// Renders a tile to 8-bit RGB.
pub fn stained_tile(size: usize, stains: &StainMatrix, seed: u64) -> Result<RgbImage> {
    let field = concentration_field(size, seed);
    let od = stained_od(&field, stains, 0.0, seed);
    RgbImage::new(size, size, od.values().iter().map(|&v| od_to_intensity(v)).collect())
}

pub fn he_stains() -> StainMatrix {
    StainMatrix::new(HEMATOXYLIN, EOSIN).expect("reference stains are valid")
}

/// Standard normal sample (Box–Muller).
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fixed nonlinear color remap that defines the second color domain.
pub fn remap_color(rgb: [u8; 3]) -> [u8; 3] {
    let [r, g, b] = rgb.map(|v| v as f64 / 255.0);
    let out = [
        0.92 * r.powf(1.35) + 0.06,
        0.15 + 0.8 * g.powf(0.8),
        0.9 * b.powf(1.5) + 0.1 * r,
    ];
    out.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn remap_image(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut().chunks_exact_mut(3) {
        let m = remap_color([p[0], p[1], p[2]]);
        p.copy_from_slice(&m);
    }
    out
}

/// Two unpaired color domains of tissue-like tiles.
#[derive(Clone, Debug)]
pub struct TwoDomainDataset {
    pub domain_a: Vec<RgbImage>,
    pub domain_b: Vec<RgbImage>,
}

impl TwoDomainDataset {
    /// `per_domain` tiles of `size`×`size` in each domain; domain B is the remap of
    /// independently drawn domain-A-style tiles.
    pub fn generate(per_domain: usize, size: usize, seed: u64) -> Result<Self> {
        let stains = he_stains();
        let domain_a = (0..per_domain as u64)
            .map(|i| stained_tile(size, &stains, seed.wrapping_mul(1_000_003).wrapping_add(2 * i)))
            .collect::<Result<Vec<_>>>()?;
        let domain_b = (0..per_domain as u64)
            .map(|i| {
                stained_tile(size, &stains, seed.wrapping_mul(1_000_003).wrapping_add(2 * i + 1)).map(|t| remap_image(&t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { domain_a, domain_b })
    }
}
