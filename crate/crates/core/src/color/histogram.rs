use std::fmt::Write as _;

use super::RgbImage;
use crate::error::{Error, Result};

/// Whether a histogram holds probabilities or raw pixel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistogramMode {
    Normalized,
    Raw,
}

/// Per-channel (R, G, B) binned intensity distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHistogram {
    bins: usize,
    channels: [Vec<f64>; 3],
    mode: HistogramMode,
}

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

fn valid_bins(bins: usize) -> bool {
    (2..=256).contains(&bins) && 256 % bins == 0
}

impl ColorHistogram {
    pub fn new(channels: [Vec<f64>; 3], mode: HistogramMode) -> Result<Self> {
        let bins = channels[0].len();
        if bins < 2 || channels.iter().any(|c| c.len() != bins) {
            return Err(Error::InvalidArgument("histogram channels must share a bin count >= 2".into()));
        }
        if channels.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("histogram mass must be finite and nonnegative".into()));
        }
        if mode == HistogramMode::Normalized {
            for c in &channels {
                let total: f64 = c.iter().sum();
                if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(Error::NotNormalized(total));
                }
            }
        }
        Ok(Self { bins, channels, mode })
    }

    /// Raw pixel counts; pixel value `v` lands in bin `v / (256 / bins)`.
    pub fn counts(img: &RgbImage, bins: usize) -> Result<Self> {
        if !valid_bins(bins) {
            return Err(Error::InvalidBinCount(bins));
        }
        let width = 256 / bins;
        let mut channels = [vec![0.0; bins], vec![0.0; bins], vec![0.0; bins]];
        let mut tally = [vec![0u64; bins], vec![0u64; bins], vec![0u64; bins]];
        for p in img.pixels().chunks_exact(3) {
            for c in 0..3 {
                tally[c][p[c] as usize / width] += 1;
            }
        }
        for c in 0..3 {
            channels[c] = tally[c].iter().map(|&n| n as f64).collect();
        }
        Ok(Self {
            bins,
            channels,
            mode: HistogramMode::Raw,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn mode(&self) -> HistogramMode {
        self.mode
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>; 3] {
        &self.channels
    }

    /// Rescales every channel to unit mass. Empty channels are left untouched.
    pub fn normalized(mut self) -> Self {
        for c in self.channels.iter_mut() {
            let total: f64 = c.iter().sum();
            if total > 0.0 {
                c.iter_mut().for_each(|v| *v /= total);
            }
        }
        self.mode = HistogramMode::Normalized;
        self
    }

    /// Plain-text export: one channel per line, bins separated by spaces.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.channels {
            let line: Vec<String> = c.iter().map(|v| format!("{v:.12e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|tok| tok.parse::<f64>().map_err(|e| Error::Format(format!("bad histogram value {tok:?}: {e}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let [r, g, b]: [Vec<f64>; 3] = rows
            .try_into()
            .map_err(|_| Error::Format("histogram text must have exactly 3 lines".into()))?;
        let normalized = [&r, &g, &b]
            .iter()
            .all(|c| (c.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let mode = if normalized {
            HistogramMode::Normalized
        } else {
            HistogramMode::Raw
        };
        let mut h = Self::new([r, g, b], HistogramMode::Raw)?;
        h.mode = mode;
        Ok(h)
    }
}

/// Normalized per-channel histogram of `img` with `bins` bins (must divide 256).
pub fn compute_histogram(img: &RgbImage, bins: usize) -> Result<ColorHistogram> {
    Ok(ColorHistogram::counts(img, bins)?.normalized())
}

/// Bin-wise arithmetic mean, accumulated in list order.
pub fn mean_histogram(hists: &[ColorHistogram]) -> Result<ColorHistogram> {
    let first = hists.first().ok_or(Error::Empty("histogram list"))?;
    let bins = first.bins;
    let mut channels = [vec![0.0; bins], vec![0.0; bins], vec![0.0; bins]];
    for h in hists {
        if h.bins != bins {
            return Err(Error::LengthMismatch(h.bins, bins));
        }
        if h.mode != HistogramMode::Normalized {
            return Err(Error::InvalidArgument("mean_histogram needs normalized histograms".into()));
        }
        for (acc, src) in channels.iter_mut().zip(&h.channels) {
            acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
        }
    }
    let n = hists.len() as f64;
    for c in channels.iter_mut() {
        c.iter_mut().for_each(|v| *v /= n);
    }
    Ok(ColorHistogram {
        bins,
        channels,
        mode: HistogramMode::Normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn delta(bins: usize, at: usize) -> ColorHistogram {
        let mut c = vec![0.0; bins];
        c[at] = 1.0;
        ColorHistogram::new([c.clone(), c.clone(), c], HistogramMode::Normalized).unwrap()
    }

    #[test]
    fn black_image_fills_bin_zero() {
        let img = RgbImage::filled(4, 4, [0, 0, 0]).unwrap();
        let h = compute_histogram(&img, 256).unwrap();
        for c in 0..3 {
            assert_eq!(h.channel(c)[0], 1.0);
            assert_eq!(h.channel(c)[1..].iter().sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn half_red_half_black_two_bins() {
        let img = RgbImage::from_fn(4, 2, |x, _| if x < 2 { [255, 0, 0] } else { [0, 0, 0] }).unwrap();
        let h = compute_histogram(&img, 2).unwrap();
        assert_eq!(h.channel(0), &[0.5, 0.5]);
        assert_eq!(h.channel(1), &[1.0, 0.0]);
        assert_eq!(h.channel(2), &[1.0, 0.0]);
    }

    #[test]
    fn matches_naive_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = RgbImage::from_fn(64, 64, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap();
        let h = compute_histogram(&img, 32).unwrap();
        for c in 0..3 {
            for b in 0..32 {
                let mut n = 0usize;
                for y in 0..64 {
                    for x in 0..64 {
                        let v = img.get(x, y)[c] as usize;
                        if v >= b * 8 && v < (b + 1) * 8 {
                            n += 1;
                        }
                    }
                }
                assert!((h.channel(c)[b] - n as f64 / 4096.0).abs() < 1e-12);
            }
            assert!((h.channel(c).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn invalid_bin_counts() {
        let img = RgbImage::filled(2, 2, [1, 2, 3]).unwrap();
        for bins in [0, 1, 3, 100, 512] {
            assert!(matches!(compute_histogram(&img, bins), Err(Error::InvalidBinCount(_))));
        }
    }

    #[test]
    fn mean_cases() {
        let h = delta(4, 1);
        assert_eq!(mean_histogram(std::slice::from_ref(&h)).unwrap(), h);
        assert_eq!(mean_histogram(&[h.clone(), h.clone()]).unwrap(), h);
        let m = mean_histogram(&[delta(4, 0), delta(4, 2)]).unwrap();
        for c in 0..3 {
            assert_eq!(m.channel(c), &[0.5, 0.0, 0.5, 0.0]);
        }
        assert!(matches!(mean_histogram(&[]), Err(Error::Empty(_))));
        assert!(mean_histogram(&[delta(4, 0), delta(8, 0)]).is_err());
    }

    #[test]
    fn text_export_round_trip() {
        let img = RgbImage::from_fn(8, 8, |x, y| [(x * 31) as u8, (y * 17) as u8, 200]).unwrap();
        let h = compute_histogram(&img, 16).unwrap();
        let text = h.to_text();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 16);
        let back = ColorHistogram::from_text(&text).unwrap();
        assert_eq!(back.mode(), HistogramMode::Normalized);
        for c in 0..3 {
            for (a, b) in back.channel(c).iter().zip(h.channel(c)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
