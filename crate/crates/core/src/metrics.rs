//! Detection metrics, the crypto timing benchmark, FLOPs accounting and the
//! link latency model.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{CryptoError, FixedPointCodec, KeyPair};
use crate::mask::encrypted_count;
use crate::scores::{calibrate_threshold, ScoreError, ScoreMethod};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} score list is empty")]
    Empty(&'static str),
    #[error("non-finite score in {0} list")]
    NonFinite(&'static str),
    #[error("rate must be positive, got {0}")]
    BadRate(f64),
    #[error("invalid benchmark setting: {0}")]
    BadBenchmark(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

fn check(scores: &[f64], which: &'static str) -> Result<(), MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty(which));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(which));
    }
    Ok(())
}

/// Mann-Whitney statistic `P(id > ood) + P(id == ood)/2`, exact.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, MetricsError> {
    check(id_scores, "ID")?;
    check(ood_scores, "OOD")?;
    let mut ood = ood_scores.to_vec();
    ood.sort_by(f64::total_cmp);
    // twice the U statistic, so ties stay integral
    let mut u2: u128 = 0;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let upto = ood.partition_point(|&o| o <= s);
        u2 += 2 * below as u128 + (upto - below) as u128;
    }
    Ok(u2 as f64 / (2 * id_scores.len() as u128 * ood.len() as u128) as f64)
}

/// Fraction of OOD scores at or above the threshold calibrated on ID scores.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64, MetricsError> {
    check(ood_scores, "OOD")?;
    let tau = calibrate_threshold(id_scores, tpr)?;
    Ok(ood_scores.iter().filter(|&&s| s >= tau).count() as f64 / ood_scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodMetrics {
    pub method: ScoreMethod,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub threshold: Option<f64>,
}

/// Per-method summary; `None` marks a metric undefined for the inputs
/// (no OOD samples, or too few ID samples to calibrate).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<MethodMetrics>,
    pub n_id: usize,
    pub n_ood: usize,
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub fn compute(
        scores: &[(ScoreMethod, Vec<f64>, Vec<f64>)],
        tpr: f64,
        config: Vec<(String, String)>,
    ) -> Self {
        let mut n_id = 0;
        let mut n_ood = 0;
        let methods = scores
            .iter()
            .map(|(method, id, ood)| {
                n_id = id.len();
                n_ood = ood.len();
                MethodMetrics {
                    method: *method,
                    auroc: auroc(id, ood).ok(),
                    fpr95: fpr_at_tpr(id, ood, tpr).ok(),
                    threshold: calibrate_threshold(id, tpr).ok(),
                }
            })
            .collect();
        Self {
            methods,
            n_id,
            n_ood,
            config,
        }
    }

    pub fn get(&self, method: ScoreMethod) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,auroc,fpr95,threshold,n_id,n_ood\n");
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m.method,
                opt(m.auroc),
                opt(m.fpr95),
                opt(m.threshold),
                self.n_id,
                self.n_ood
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let _ = writeln!(out, "# n_id = {}, n_ood = {}", self.n_id, self.n_ood);
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>12}", "method", "AUROC", "FPR95", "threshold");
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>12}",
                m.method.name(),
                m.auroc.map_or("NA".into(), |v| format!("{v:.4}")),
                m.fpr95.map_or("NA".into(), |v| format!("{v:.4}")),
                m.threshold.map_or("NA".into(), |v| format!("{v:.4}")),
            );
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub fraction: f64,
    pub channels: usize,
    pub median_ms_encrypt: f64,
    pub median_ms_decrypt: f64,
    pub median_ms_total: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times encryption and decryption of `ceil(fraction * C)` channels of one
/// random feature vector, sequentially on the calling thread.
pub fn bench_crypto(
    kp: &KeyPair,
    fractions: &[f64],
    channels: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, MetricsError> {
    if trials < 3 {
        return Err(MetricsError::BadBenchmark(format!("need >= 3 trials, got {trials}")));
    }
    if channels == 0 {
        return Err(MetricsError::BadBenchmark("channel count must be positive".into()));
    }
    let codec = FixedPointCodec::default();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut counts = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(MetricsError::BadBenchmark(format!("fraction {fraction} outside [0, 1]")));
        }
        counts.push(if fraction == 0.0 {
            0
        } else {
            encrypted_count(fraction, channels)
        });
    }
    // each round times every fraction once
    let mut times = vec![(Vec::new(), Vec::new(), Vec::new()); fractions.len()];
    for _ in 0..trials {
        for (&count, (enc, dec, total)) in counts.iter().zip(times.iter_mut()) {
            let values: Vec<f64> = (0..count).map(|_| rng.random_range(-10.0..10.0)).collect();
            let t0 = Instant::now();
            let cts = values
                .iter()
                .map(|&v| kp.public.encrypt_with_rng(&codec.encode(v, &kp.public)?, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let t1 = Instant::now();
            for ct in &cts {
                kp.private.decrypt(ct)?;
            }
            let t2 = Instant::now();
            enc.push((t1 - t0).as_secs_f64() * 1e3);
            dec.push((t2 - t1).as_secs_f64() * 1e3);
            total.push((t2 - t0).as_secs_f64() * 1e3);
        }
    }
    let rows = fractions
        .iter()
        .zip(counts)
        .zip(times)
        .map(|((&fraction, count), (mut enc, mut dec, mut total))| BenchRow {
            fraction,
            channels: count,
            median_ms_encrypt: median(&mut enc),
            median_ms_decrypt: median(&mut dec),
            median_ms_total: median(&mut total),
        })
        .collect();
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("fraction,median_ms_encrypt,median_ms_decrypt\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.fraction, r.median_ms_encrypt, r.median_ms_decrypt);
    }
    out
}

/// Inputs to [`flops_report`]. `training_passes` counts per-sample
/// forward+backward passes; `backbone_flops` is per inference sample and
/// defaults to zero since no backbone runs here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsConfig {
    pub features: u64,
    pub classes: u64,
    pub training_passes: u64,
    pub inference_samples: u64,
    pub encrypted_channels: u64,
    pub key_bits: u64,
    pub backbone_flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsReport {
    pub forward: u64,
    pub backward: u64,
    pub training_total: u64,
    pub inference_total: u64,
    pub modexp_count: u64,
    pub modmul_count: u64,
    pub crypto_flops: u64,
    /// `(forward + backward) / forward` for one sample.
    pub train_inference_ratio: f64,
    pub overhead_percent: f64,
}

/// Cost of one modular multiplication of `bits`-bit operands with 64-bit
/// limbs: schoolbook product plus reduction, two FLOP-equivalents per limb
/// multiply-add.
pub fn modmul_flops(bits: u64) -> u64 {
    let limbs = bits.div_ceil(64);
    2 * 2 * limbs * limbs
}

/// Analytic operation counts. The classifier forward pass is `2FK + K`, the
/// backward pass twice that. Device crypto covers encrypting the uploaded
/// channels plus the sentinel (one `n`-bit exponent over `n^2` each) and CRT
/// decryption of the `FK + K + 1` returned values (two half-size exponents
/// over `p^2`, `q^2`); a square-and-multiply exponent of `e` bits costs
/// `1.5 e` multiplications.
pub fn flops_report(cfg: &FlopsConfig) -> FlopsReport {
    let forward = 2 * cfg.features * cfg.classes + cfg.classes;
    let backward = 2 * forward;
    let training_total = (forward + backward) * cfg.training_passes;
    let inference_total = (forward + cfg.backbone_flops) * cfg.inference_samples;

    let uploads = cfg.encrypted_channels + 1;
    let downloads = cfg.features * cfg.classes + cfg.classes + 1;
    let n = cfg.key_bits;
    let enc_muls = uploads * (3 * n / 2 + 1);
    let dec_muls = downloads * 2 * (3 * (n / 2) / 2 + 1);
    let crypto_flops = enc_muls * modmul_flops(2 * n) + dec_muls * modmul_flops(n);
    let overhead_percent = if inference_total == 0 {
        f64::INFINITY
    } else {
        100.0 * crypto_flops as f64 / inference_total as f64
    };
    FlopsReport {
        forward,
        backward,
        training_total,
        inference_total,
        modexp_count: uploads + 2 * downloads,
        modmul_count: enc_muls + dec_muls,
        crypto_flops,
        train_inference_ratio: (forward + backward) as f64 / forward as f64,
        overhead_percent,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyEstimate {
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub download_rate: f64,
    pub upload_rate: f64,
    pub up_seconds: f64,
    pub down_seconds: f64,
    pub crypto_seconds: f64,
    pub total_seconds: f64,
}

/// Transfer-time model with the upload link at a quarter of the download rate.
pub fn latency_model(
    up_bytes: u64,
    down_bytes: u64,
    download_rate: f64,
    crypto_seconds: f64,
) -> Result<LatencyEstimate, MetricsError> {
    if !(download_rate > 0.0 && download_rate.is_finite()) {
        return Err(MetricsError::BadRate(download_rate));
    }
    let upload_rate = download_rate / 4.0;
    let up_seconds = up_bytes as f64 / upload_rate;
    let down_seconds = down_bytes as f64 / download_rate;
    Ok(LatencyEstimate {
        up_bytes,
        down_bytes,
        download_rate,
        upload_rate,
        up_seconds,
        down_seconds,
        crypto_seconds,
        total_seconds: up_seconds + down_seconds + crypto_seconds,
    })
}
