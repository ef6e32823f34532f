//! Metric oracles, the FLOPs identity and the latency model.

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use secdood_core::metrics::{auroc, flops_report, fpr_at_tpr, latency_model, FlopsConfig};

use crate::Check;

/// O(n m) Mann-Whitney count with ties worth one half.
pub fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut acc = 0.0;
    for a in id {
        for b in ood {
            if a > b {
                acc += 1.0;
            } else if a == b {
                acc += 0.5;
            }
        }
    }
    acc / (id.len() * ood.len()) as f64
}

pub fn metrics_oracle(instances: usize, per_side: usize, fpr_n: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for i in 0..instances {
        // every other instance is quantized so that ties occur
        let draw = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<f64> {
            (0..per_side)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0) + shift;
                    if i % 2 == 0 {
                        (v * 4.0).round() / 4.0
                    } else {
                        v
                    }
                })
                .collect()
        };
        let shift = rng.random_range(0.0..1.0);
        let id = draw(&mut rng, shift);
        let ood = draw(&mut rng, 0.0);
        worst = worst.max((auroc(&id, &ood)? - pairwise_auroc(&id, &ood)).abs());
    }
    let normal = Normal::new(0.0, 1.0)?;
    let id: Vec<f64> = (0..fpr_n).map(|_| normal.sample(&mut rng)).collect();
    let ood: Vec<f64> = (0..fpr_n).map(|_| normal.sample(&mut rng)).collect();
    let fpr = fpr_at_tpr(&id, &ood, 0.95)?;
    Ok(Check::new(
        worst <= 1e-12 && (fpr - 0.95).abs() <= 0.03,
        format!("AUROC max |err| {worst:.1e} over {instances} instances; fpr@tpr0.95 on identical n={fpr_n}: {fpr:.4}"),
    ))
}

/// Training/inference ratio must be exactly 3 for every classifier shape.
pub fn flops_identity() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact = true;
    for _ in 0..100 {
        let cfg = FlopsConfig {
            features: rng.random_range(1..4096),
            classes: rng.random_range(1..1000),
            training_passes: 1,
            inference_samples: 1,
            encrypted_channels: 1,
            key_bits: 2048,
            backbone_flops: 0,
        };
        exact &= flops_report(&cfg).train_inference_ratio == 3.0;
    }
    let desk = flops_report(&FlopsConfig {
        features: 16,
        classes: 8,
        training_passes: 1,
        inference_samples: 1,
        encrypted_channels: 8,
        key_bits: 2048,
        backbone_flops: 0,
    });
    let wide = flops_report(&FlopsConfig {
        features: 3584,
        classes: 51,
        training_passes: 1,
        inference_samples: 1,
        encrypted_channels: 1792,
        key_bits: 2048,
        backbone_flops: 0,
    });
    exact &= desk.train_inference_ratio == 3.0 && wide.train_inference_ratio == 3.0;
    Ok(Check::new(
        exact,
        format!(
            "ratio {} (F=16 K=8), {} (F=3584 K=51); crypto overhead {:.3e}% and {:.3e}% of one classifier inference",
            desk.train_inference_ratio, wide.train_inference_ratio, desk.overhead_percent, wide.overhead_percent
        ),
    ))
}

/// Upload time equals `4 * bytes / download_rate` bit for bit.
pub fn latency_rule(pairs: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = 0;
    for _ in 0..pairs {
        let up: u64 = rng.random_range(1..1u64 << 40);
        let down: u64 = rng.random_range(1..1u64 << 40);
        let rate = 10f64.powf(rng.random_range(3.0..10.0));
        let crypto = rng.random_range(0.0..5.0);
        let e = latency_model(up, down, rate, crypto)?;
        let ok = e.upload_rate * 4.0 == rate
            && e.up_seconds == 4.0 * (up as f64 / rate)
            && e.down_seconds == down as f64 / rate
            && e.total_seconds == e.up_seconds + e.down_seconds + crypto;
        exact += ok as usize;
    }
    let example = latency_model(1_000_000, 0, 100e6, 0.0)?.up_seconds;
    Ok(Check::new(
        exact == pairs && example == 0.04,
        format!("{exact}/{pairs} exact; 1 MB up at 100 MB/s download: {example} s"),
    ))
}
