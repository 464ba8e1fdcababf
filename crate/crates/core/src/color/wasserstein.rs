use super::ColorHistogram;
use crate::error::{Error, Result};

const MASS_TOLERANCE: f64 = 1e-6;

/// Earth mover's distance between two 1-D distributions on a unit-spaced grid.
///
/// Computed as the L1 distance between the cumulative distributions.
pub fn wasserstein_1d(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    if p.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    for dist in [p, q] {
        let mass: f64 = dist.iter().sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE || dist.iter().any(|v| *v < 0.0) {
            return Err(Error::NotNormalized(mass));
        }
    }
    let mut cdf_gap = 0.0f64;
    let mut total = 0.0f64;
    for (a, b) in p.iter().zip(q) {
        cdf_gap += a - b;
        total += cdf_gap.abs();
    }
    Ok(total)
}

/// Sum over the R, G and B channels of the per-channel [`wasserstein_1d`].
pub fn histogram_distance(h1: &ColorHistogram, h2: &ColorHistogram) -> Result<f64> {
    if h1.bins() != h2.bins() {
        return Err(Error::LengthMismatch(h1.bins(), h2.bins()));
    }
    (0..3).try_fold(0.0, |acc, c| Ok(acc + wasserstein_1d(h1.channel(c), h2.channel(c))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::HistogramMode;
    use proptest::prelude::*;

    fn delta(n: usize, at: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        v
    }

    fn normalize(v: Vec<f64>) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn point_masses() {
        let p = delta(10, 0);
        assert_eq!(wasserstein_1d(&p, &p).unwrap(), 0.0);
        for k in 0..10 {
            assert_eq!(wasserstein_1d(&p, &delta(10, k)).unwrap(), k as f64);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(wasserstein_1d(&[0.5, 0.5], &[1.0]), Err(Error::LengthMismatch(2, 1))));
        assert!(matches!(wasserstein_1d(&[0.5, 0.4], &[1.0, 0.0]), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn channel_isolation() {
        let base = ColorHistogram::new([delta(8, 1), delta(8, 2), delta(8, 3)], HistogramMode::Normalized).unwrap();
        let shifted = ColorHistogram::new([delta(8, 6), delta(8, 2), delta(8, 3)], HistogramMode::Normalized).unwrap();
        assert_eq!(histogram_distance(&base, &base).unwrap(), 0.0);
        assert_eq!(histogram_distance(&base, &shifted).unwrap(), 5.0);
        assert_eq!(histogram_distance(&shifted, &base).unwrap(), 5.0);
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, n).prop_map(normalize)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn metric_axioms((p, q, r) in (2usize..24).prop_flat_map(|n| (dist(n), dist(n), dist(n)))) {
            let pq = wasserstein_1d(&p, &q).unwrap();
            let qp = wasserstein_1d(&q, &p).unwrap();
            let pr = wasserstein_1d(&p, &r).unwrap();
            let rq = wasserstein_1d(&r, &q).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert!((pq - qp).abs() <= 1e-9);
            prop_assert!(pq <= pr + rq + 1e-9);
            prop_assert!(wasserstein_1d(&p, &p).unwrap() == 0.0);
        }
    }
}
