use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::RgbImage;

/// Smallest crop side, as a fraction of the image side.
const MIN_CROP: f64 = 0.75;
pub const GAIN_RANGE: (f64, f64) = (0.7, 1.3);
pub const OFFSET_RANGE: (f64, f64) = (-0.15, 0.15);

/// A geometric draw: flips, quarter turns and a crop resized back to full size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorAugment {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    /// Crop side as a fraction of the image side, in `[0.75, 1]`.
    pub crop_scale: f64,
    /// Crop origin as a fraction of the free margin, in `[0, 1]²`.
    pub crop_origin: (f64, f64),
}

impl ColorAugment {
    pub fn identity() -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            quarter_turns: 0,
            crop_scale: 1.0,
            crop_origin: (0.0, 0.0),
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip_horizontal: rng.gen(),
            flip_vertical: rng.gen(),
            quarter_turns: rng.gen_range(0..4),
            crop_scale: rng.gen_range(MIN_CROP..=1.0),
            crop_origin: (rng.gen(), rng.gen()),
        }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let mut out = img.clone();
        if self.flip_horizontal {
            out = remap(&out, out.width(), out.height(), |x, y, w, _| (w - 1 - x, y));
        }
        if self.flip_vertical {
            out = remap(&out, out.width(), out.height(), |x, y, _, h| (x, h - 1 - y));
        }
        for _ in 0..self.quarter_turns % 4 {
            // output (x, y) of the turned image reads input (w_in − 1 − y, x)
            let (w, h) = (out.width(), out.height());
            out = remap(&out, h, w, |x, y, _, _| (w - 1 - y, x));
        }
        if self.crop_scale < 1.0 {
            out = crop_resize(&out, self.crop_scale, self.crop_origin);
        }
        out
    }
}

fn remap(img: &RgbImage, w: usize, h: usize, src: impl Fn(usize, usize, usize, usize) -> (usize, usize)) -> RgbImage {
    let (iw, ih) = (img.width(), img.height());
    RgbImage::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y, iw, ih);
        img.get(sx, sy)
    })
    .expect("remapped image keeps a valid size")
}

fn crop_resize(img: &RgbImage, scale: f64, origin: (f64, f64)) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let cw = (w as f64 * scale).clamp(1.0, w as f64);
    let ch = (h as f64 * scale).clamp(1.0, h as f64);
    let x0 = origin.0.clamp(0.0, 1.0) * (w as f64 - cw);
    let y0 = origin.1.clamp(0.0, 1.0) * (h as f64 - ch);
    RgbImage::from_fn(w, h, |x, y| {
        // bilinear sample at the pixel center mapped into the crop
        let sx = (x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let sy = (y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (xa, ya) = (sx.floor() as usize, sy.floor() as usize);
        let (xb, yb) = ((xa + 1).min(w - 1), (ya + 1).min(h - 1));
        let (fx, fy) = (sx - xa as f64, sy - ya as f64);
        let (p00, p10, p01, p11) = (img.get(xa, ya), img.get(xb, ya), img.get(xa, yb), img.get(xb, yb));
        std::array::from_fn(|c| {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            (top * (1.0 - fy) + bottom * fy).round() as u8
        })
    })
    .expect("crop keeps a valid size")
}

/// Per-channel affine color jitter `c·x + b` on intensities scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructureAugment {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl StructureAugment {
    pub fn identity() -> Self {
        Self {
            gain: [1.0; 3],
            offset: [0.0; 3],
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let gain = std::array::from_fn(|_| rng.gen_range(GAIN_RANGE.0..=GAIN_RANGE.1));
        let offset = std::array::from_fn(|_| rng.gen_range(OFFSET_RANGE.0..=OFFSET_RANGE.1));
        Self { gain, offset }
    }

    /// Pulls each channel's map toward the identity just enough that the channel's
    /// intensity range of `img` stays inside `[0, 1]`, so no value is clipped.
    pub fn fitted_to(&self, img: &RgbImage) -> Self {
        let mut out = *self;
        for c in 0..3 {
            let (lo, hi) = img
                .pixels()
                .iter()
                .skip(c)
                .step_by(3)
                .fold((255u8, 0u8), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if lo > hi {
                continue;
            }
            // f_t(x) = x + t·((g − 1)·x + b), linear in t with f_0 the identity
            let mut t = 1.0f64;
            for x in [lo as f64 / 255.0, hi as f64 / 255.0] {
                let shift = (self.gain[c] - 1.0) * x + self.offset[c];
                if x + shift > 1.0 {
                    t = t.min((1.0 - x) / shift);
                } else if x + shift < 0.0 {
                    t = t.min(-x / shift);
                }
            }
            out.gain[c] = 1.0 + t * (self.gain[c] - 1.0);
            out.offset[c] = t * self.offset[c];
        }
        out
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let mut out = img.clone();
        for p in out.pixels_mut().chunks_exact_mut(3) {
            for (c, ch) in p.iter_mut().enumerate() {
                let v = self.gain[c] * *ch as f64 / 255.0 + self.offset[c];
                *ch = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }
}

/// Same colors, different geometry.
pub fn augment_color_preserving(img: &RgbImage, seed: u64) -> RgbImage {
    ColorAugment::sample(&mut ChaCha8Rng::seed_from_u64(seed)).apply(img)
}

/// Same geometry, different colors.
pub fn augment_structure_preserving(img: &RgbImage, seed: u64) -> RgbImage {
    StructureAugment::sample(&mut ChaCha8Rng::seed_from_u64(seed))
        .fitted_to(img)
        .apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| [(x * 20) as u8, (y * 30) as u8, ((x + y) * 7) as u8]).unwrap()
    }

    #[test]
    fn identity_draw_is_noop() {
        let img = ramp(6, 4);
        assert_eq!(ColorAugment::identity().apply(&img), img);
        assert_eq!(StructureAugment::identity().apply(&img), img);
    }

    #[test]
    fn four_turns_and_double_flips_cancel() {
        let img = ramp(5, 3);
        let mut a = ColorAugment::identity();
        a.quarter_turns = 1;
        let once = a.apply(&img);
        assert_eq!((once.width(), once.height()), (3, 5));
        let mut t = once;
        for _ in 0..3 {
            t = a.apply(&t);
        }
        assert_eq!(t, img);
        let mut f = ColorAugment::identity();
        f.flip_horizontal = true;
        f.flip_vertical = true;
        assert_eq!(f.apply(&f.apply(&img)), img);
        let mut half = ColorAugment::identity();
        half.quarter_turns = 2;
        assert_eq!(half.apply(&img), f.apply(&img));
    }

    #[test]
    fn geometric_draws_keep_the_palette() {
        let img = ramp(8, 8);
        let mut a = ColorAugment::sample(&mut ChaCha8Rng::seed_from_u64(9));
        a.crop_scale = 1.0;
        let out = a.apply(&img);
        let mut before: Vec<_> = img.pixels().chunks(3).map(|p| p.to_vec()).collect();
        let mut after: Vec<_> = out.pixels().chunks(3).map(|p| p.to_vec()).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }

    #[test]
    fn fitted_map_stays_in_range() {
        let img = ramp(12, 9);
        let a = StructureAugment {
            gain: [1.3, 0.7, 1.0],
            offset: [0.15, -0.15, 0.0],
        };
        let f = a.fitted_to(&img);
        assert_eq!(f.gain[2], 1.0);
        for c in 0..2 {
            for v in img.pixels().iter().skip(c).step_by(3) {
                let y = f.gain[c] * *v as f64 / 255.0 + f.offset[c];
                assert!((-1e-12..=1.0 + 1e-12).contains(&y));
            }
        }
        let dark = RgbImage::filled(2, 2, [100, 100, 100]).unwrap();
        assert_eq!(a.fitted_to(&dark), a);
    }

    #[test]
    fn seeded_determinism() {
        let img = ramp(8, 8);
        assert_eq!(augment_color_preserving(&img, 3), augment_color_preserving(&img, 3));
        assert_eq!(augment_structure_preserving(&img, 3), augment_structure_preserving(&img, 3));
        assert_ne!(augment_structure_preserving(&img, 3), augment_structure_preserving(&img, 4));
    }
}
