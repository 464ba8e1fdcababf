mod common;

use rand::Rng;
use stainkit::color::{
    compute_histogram, histogram_distance, mean_histogram, select_template, select_template_detailed, wasserstein_1d,
    RgbImage,
};
use stainkit::Execution;

#[test]
fn histogram_equals_naive_tally() {
    let mut r = common::rng(1);
    for bins in [8, 32, 256] {
        let img = common::random_image(64, 64, &mut r);
        let h = compute_histogram(&img, bins).unwrap();
        let t = common::tally(&img, bins);
        for (c, counts) in t.iter().enumerate() {
            let expected: Vec<f64> = counts.iter().map(|&n| n as f64 / 4096.0).collect();
            assert_eq!(h.channel(c), expected.as_slice());
            assert!((h.channel(c).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn wasserstein_matches_transport_lp() {
    let mut r = common::rng(2);
    for _ in 0..200 {
        let len = r.gen_range(1..=16);
        let p = common::random_distribution(len, &mut r);
        let q = common::random_distribution(len, &mut r);
        let got = wasserstein_1d(&p, &q).unwrap();
        let lp = common::transport_lp(&p, &q);
        assert!((got - lp).abs() < 1e-6, "{got} vs {lp} on {p:?} / {q:?}");
    }
}

/// Dataset of `n` random images with planted ties: exact copies and pixel shuffles.
fn dataset_with_ties(n: usize, rng: &mut impl Rng) -> Vec<RgbImage> {
    let mut images: Vec<RgbImage> = (0..n).map(|_| common::random_image(12, 12, rng)).collect();
    for _ in 0..3 {
        let from = rng.gen_range(0..n);
        let to = rng.gen_range(0..n);
        let mut copy = images[from].clone();
        if rng.gen_bool(0.5) {
            let mut px: Vec<[u8; 3]> = copy.pixels().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            px.reverse();
            copy = RgbImage::new(12, 12, px.concat()).unwrap();
        }
        images[to] = copy;
    }
    images
}

#[test]
fn template_selection_matches_exhaustive_scan() {
    let mut r = common::rng(3);
    for trial in 0..20 {
        let bins = [8, 16, 64, 256][trial % 4];
        let images = dataset_with_ties(20, &mut r);
        assert_eq!(select_template(&images, bins).unwrap(), common::template_argmin(&images, bins), "trial {trial}");
    }
}

#[test]
fn majority_color_wins() {
    let black = RgbImage::filled(4, 4, [0, 0, 0]).unwrap();
    let white = RgbImage::filled(4, 4, [255, 255, 255]).unwrap();
    assert_eq!(select_template(&[black.clone(), black, white], 256).unwrap(), 0);
}

#[test]
fn selection_is_permutation_invariant_up_to_ties() {
    let mut r = common::rng(4);
    let images: Vec<RgbImage> = (0..10).map(|_| common::random_image(10, 10, &mut r)).collect();
    let chosen = &images[select_template(&images, 32).unwrap()];
    let mut reversed = images.clone();
    reversed.reverse();
    assert_eq!(&reversed[select_template(&reversed, 32).unwrap()], chosen);
}

#[test]
fn sequential_and_parallel_selection_agree() {
    let mut r = common::rng(5);
    let images: Vec<RgbImage> = (0..12).map(|_| common::random_image(16, 16, &mut r)).collect();
    let a = select_template_detailed(&images, 64, Execution::Sequential).unwrap();
    let b = select_template_detailed(&images, 64, Execution::Parallel).unwrap();
    assert_eq!(a.index, b.index);
    assert_eq!(a.distances, b.distances);
    assert_eq!(a.mean, b.mean);
}

#[test]
fn mean_distance_is_bounded_by_the_dataset() {
    let mut r = common::rng(6);
    let images: Vec<RgbImage> = (0..8).map(|_| common::random_image(8, 8, &mut r)).collect();
    let hists: Vec<_> = images.iter().map(|i| compute_histogram(i, 16).unwrap()).collect();
    let mean = mean_histogram(&hists).unwrap();
    let ds: Vec<f64> = hists.iter().map(|h| histogram_distance(h, &mean).unwrap()).collect();
    let best = ds.iter().cloned().fold(f64::INFINITY, f64::min);
    let worst = ds.iter().cloned().fold(0.0, f64::max);
    assert!(best <= worst);
    let sel = select_template_detailed(&images, 16, Execution::Sequential).unwrap();
    assert_eq!(sel.distances[sel.index], best);
}
