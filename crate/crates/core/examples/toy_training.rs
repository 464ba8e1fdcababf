//! Trains the restaining network on generated two-domain tiles and reports
//! reconstruction, feature separation and normalization quality.
//!
//! `cargo run --release --example toy_training -- [steps]`

use std::time::Instant;

use stainkit::color::{compute_histogram, histogram_distance, select_template};
use stainkit::metrics::ssim;
use stainkit::model::{FeatureRole, ModelConfig, StainPidr, Trainer, TrainingBatch};
use stainkit::synthetic::TwoDomainDataset;

fn main() -> stainkit::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let train = TwoDomainDataset::generate(200, 64, 1)?;
    let held = TwoDomainDataset::generate(50, 64, 2)?;
    let mut trainer = Trainer::new(StainPidr::new(ModelConfig::default())?);
    let start = Instant::now();
    trainer.fit(&train.domain_a, &train.domain_b, steps, |step, r| {
        if step % 25 == 0 || step <= 10 {
            println!(
                "{step:4} total {:.4} cc {:.4} cs {:.4} vq {:.4} ra {:.4} rb {:.4} ({:.0?})",
                r.total, r.contrast_color, r.contrast_structure, r.codebook, r.recon_a, r.recon_b, start.elapsed()
            );
        }
    })?;
    let model = trainer.model();
    println!("codebook entries used: {}", model.codebook().used_entries());

    let mut gap = 0.0;
    let mut mse = 0.0;
    for (i, (a, b)) in held.domain_a.iter().zip(&held.domain_b).enumerate() {
        let batch = TrainingBatch::from_pair(a, b, 1000 + i as u64);
        let pos = model.feature_similarity(&batch.a, &batch.a_prime, FeatureRole::Color)?;
        let neg = model.feature_similarity(&batch.a, &batch.b, FeatureRole::Color)?;
        gap += (pos - neg) as f64;
        let r = model.reconstruct(a)?;
        let t = a.to_tensor();
        mse += r.data().iter().zip(t.data()).map(|(x, y)| ((x - y) * (x - y)) as f64).sum::<f64>() / t.numel() as f64;
    }
    println!("mean cos gap {:.4}, held-out recon mse {:.5}", gap / 50.0, mse / 50.0);

    let template = &train.domain_a[select_template(&train.domain_a, 256)?];
    let ht = compute_histogram(template, 256)?;
    let mut better = 0;
    let mut min_ssim: f64 = 1.0;
    for src in held.domain_b.iter().take(20) {
        let out = model.normalize_image(src, template)?;
        let d_out = histogram_distance(&compute_histogram(&out, 256)?, &ht)?;
        let d_src = histogram_distance(&compute_histogram(src, 256)?, &ht)?;
        better += usize::from(d_out < d_src);
        min_ssim = min_ssim.min(ssim(&out, src)?);
    }
    println!("closer to template: {better}/20, min ssim {min_ssim:.4}, {:.0?}", start.elapsed());
    Ok(())
}
