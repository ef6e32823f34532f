//! Shapley estimation, hypernetwork gradients and the desk-scale pipeline.

use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use secdood_cloud::{synth_splits, Limits, Model, ServeMode, Service};
use secdood_core::features::{FeatureDataset, SynthConfig};
use secdood_core::hypernet::{DeviceProfile, GeneratedParams, HyperNetConfig, HyperNetParams};
use secdood_core::mask::{build_mask_plan, encrypted_count, MaskPlan};
use secdood_core::scores::ScoreMethod;
use secdood_device::{run_detection, DeviceConfig, ScoringOptions};
use secdood_train::classifier::accuracy;
use secdood_train::hypertrain::{loss_and_grad, set_trainable, train_hypernet, trainable, TrainOptions};
use secdood_train::shapley::{compute_importance, shapley_exact, shapley_monte_carlo, FnGame, ImportanceConfig, MonteCarloConfig, ValueFunction};

use crate::{median, secs, Check};

/// Additive weights plus pairwise synergies and a per-coalition jitter, so
/// the game is neither additive nor symmetric.
fn random_game(c: usize, seed: u64) -> FnGame<impl Fn(&[bool]) -> f64 + Sync> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..2.0)).collect();
    let pair: Vec<f64> = (0..c * c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let jitter: Vec<f64> = (0..1usize << c).map(|_| rng.random_range(-0.05..0.05)).collect();
    FnGame::new(c, move |s: &[bool]| {
        let mut v = 0.0;
        let mut key = 0usize;
        for i in 0..c {
            if s[i] {
                key |= 1 << i;
                v += w[i];
                for j in i + 1..c {
                    if s[j] {
                        v += pair[i * c + j];
                    }
                }
            }
        }
        v + jitter[key]
    })
}

pub fn shapley_oracle(channels: usize, games: usize, permutations: usize, budget: Duration) -> Result<Check> {
    let start = Instant::now();
    let (mut worst_ratio, mut worst_eff) = (0.0f64, 0.0f64);
    for g in 0..games {
        let game = random_game(channels, 100 + g as u64);
        let exact = shapley_exact(&game)?;
        let est = shapley_monte_carlo(&game, &MonteCarloConfig::new(permutations, g as u64))?;
        let range = exact.iter().cloned().fold(f64::MIN, f64::max) - exact.iter().cloned().fold(f64::MAX, f64::min);
        let err = est.scores.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(err / range);
        let grand = game.value(&vec![true; channels]) - game.value(&vec![false; channels]);
        for s in [&exact, &est.scores] {
            worst_eff = worst_eff.max((s.iter().sum::<f64>() - grand).abs());
        }
    }
    let took = start.elapsed();
    Ok(Check::new(
        worst_ratio <= 0.05 && worst_eff <= 1e-9 && took < budget,
        format!(
            "C={channels}, {games} games, {permutations} permutations: max err {:.4} of range, efficiency gap {worst_eff:.1e}, {}",
            worst_ratio,
            secs(took)
        ),
    ))
}

fn gradient_instance(config: HyperNetConfig, seed: u64) -> Result<(HyperNetParams, Vec<f64>, Vec<Vec<f64>>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = HyperNetParams::init(config, &mut rng)?;
    for layer in &mut params.layers {
        if let Some(bn) = &mut layer.bn {
            for j in 0..bn.gamma.len() {
                bn.gamma[j] = rng.random_range(0.5..1.5);
                bn.beta[j] = rng.random_range(-0.5..0.5);
                bn.running_mean[j] = rng.random_range(-0.3..0.3);
                bn.running_var[j] = rng.random_range(0.5..2.0);
            }
        }
    }
    let f = config.input_dim;
    let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let ys: Vec<usize> = (0..6).map(|i| i % config.num_classes).collect();
    let profile = DeviceProfile::from_batch(xs.iter().map(Vec::as_slice), None, f)?.values().to_vec();
    Ok((params, profile, xs, ys))
}

/// Largest per-tensor `||analytic - fd|| / max(||analytic||, ||fd||)`.
fn worst_tensor_error(config: HyperNetConfig, h: f64) -> Result<(f64, usize)> {
    let (params, profile, xs, ys) = gradient_instance(config, 11)?;
    let xb: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let (_, grads) = loss_and_grad(&params, &profile, &xb, &ys)?;
    let base = trainable(&params);
    let loss_at = |flat: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        set_trainable(&mut p, flat);
        Ok(loss_and_grad(&p, &profile, &xb, &ys)?.0)
    };
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let (mut up, mut dn) = (base.clone(), base.clone());
        up[i] += h;
        dn[i] -= h;
        numeric.push((loss_at(&up)? - loss_at(&dn)?) / (2.0 * h));
    }
    let tensors: Vec<&Vec<f64>> = grads.iter().flat_map(|g| [&g.weight, &g.bias, &g.gamma, &g.beta]).filter(|t| !t.is_empty()).collect();
    ensure!(tensors.iter().map(|t| t.len()).sum::<usize>() == numeric.len(), "gradient layout mismatch");
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let (mut at, mut worst) = (0, 0.0f64);
    for t in &tensors {
        let fd = &numeric[at..at + t.len()];
        let diff = norm(&mut t.iter().zip(fd).map(|(a, b)| a - b));
        let scale = norm(&mut t.iter().copied()).max(norm(&mut fd.iter().copied()));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
        at += t.len();
    }
    Ok((worst, tensors.len()))
}

pub fn gradient_check(h: f64, tolerance: f64) -> Result<Check> {
    let mut parts = Vec::new();
    let mut pass = true;
    let mut no_bn = HyperNetConfig::single(5, 3);
    no_bn.batch_norm = false;
    for (name, config) in [
        ("single+bn", HyperNetConfig::single(6, 4)),
        ("single", no_bn),
        ("two-layer", HyperNetConfig::two_layer(5, 7, 3)),
    ] {
        let (err, tensors) = worst_tensor_error(config, h)?;
        pass &= err <= tolerance;
        parts.push(format!("{name}: {tensors} tensors, max rel {err:.2e}"));
    }
    Ok(Check::new(pass, parts.join("; ")))
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub accuracy: f64,
    pub auroc_full: f64,
    pub auroc_importance: Vec<f64>,
    pub auroc_random: Vec<f64>,
    pub elapsed: Duration,
}

fn ood_auroc(params: &HyperNetParams, plan: MaskPlan, calib: &FeatureDataset, test: &FeatureDataset) -> Result<(GeneratedParams, f64)> {
    let model = Model::new(params.clone(), plan.clone(), ServeMode::EncryptedAffine)?;
    let svc = Service::bind("127.0.0.1:0", model, Limits::default())?.spawn()?;
    let mut cfg = DeviceConfig::new(svc.addr.to_string(), plan);
    cfg.key_bits = 1024;
    cfg.scoring = ScoringOptions {
        methods: vec![ScoreMethod::Energy],
        ..ScoringOptions::default()
    };
    let out = run_detection(&cfg, calib, test);
    svc.stop()?;
    let out = out?;
    let auroc = out.report.get(ScoreMethod::Energy).and_then(|m| m.auroc).context("no Energy AUROC")?;
    Ok((out.theta, auroc))
}

/// Trains on synthetic data, then runs encrypted loopback sessions at full
/// encryption, at `alpha` with importance masks and at `alpha` with random
/// masks, one importance and one random mask per seed.
pub fn end_to_end(base: &SynthConfig, ood_shift: f64, alpha: f64, seeds: u64) -> Result<EndToEnd> {
    let start = Instant::now();
    let data = synth_splits(base, ood_shift)?;
    let config = HyperNetConfig::single(base.channels, base.num_classes);
    let trained = train_hypernet(config, &data.train, &data.val, &TrainOptions::default())?;
    let c = base.channels;
    let (theta, auroc_full) = ood_auroc(&trained.params, MaskPlan::full(c), &data.calib, &data.test)?;
    let (xs, ys): (Vec<Vec<f64>>, Vec<usize>) = data
        .test
        .samples()
        .iter()
        .filter_map(|s| s.label.class().map(|y| (s.feature.to_f64(), y)))
        .unzip();
    let acc = accuracy(&theta, &xs, &ys)?;
    let (mut imp, mut rnd) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        let scores = compute_importance(
            &data.train,
            &ImportanceConfig {
                seed,
                ..ImportanceConfig::default()
            },
        )?;
        let plan = build_mask_plan(&scores, alpha)?;
        imp.push(ood_auroc(&trained.params, plan, &data.calib, &data.test)?.1);
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(1000 + seed));
        order.truncate(encrypted_count(alpha, c));
        let plan = MaskPlan::from_encrypted(c, alpha, order)?;
        rnd.push(ood_auroc(&trained.params, plan, &data.calib, &data.test)?.1);
    }
    Ok(EndToEnd {
        accuracy: acc,
        auroc_full,
        auroc_importance: imp,
        auroc_random: rnd,
        elapsed: start.elapsed(),
    })
}

impl EndToEnd {
    pub fn checks(&self, budget: Duration) -> Vec<(&'static str, Check)> {
        let (mi, mr) = (median(&self.auroc_importance), median(&self.auroc_random));
        let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(",");
        vec![
            ("e2e ID accuracy", Check::new(self.accuracy >= 0.90, format!("{:.4} >= 0.90", self.accuracy))),
            ("e2e Energy AUROC", Check::new(self.auroc_full >= 0.85, format!("{:.4} >= 0.85 at alpha=1.0", self.auroc_full))),
            (
                "e2e alpha=0.5 vs 1.0",
                Check::new(
                    mi >= self.auroc_full - 0.05,
                    format!("median {mi:.4} vs {:.4}, loss {:.4} <= 0.05", self.auroc_full, self.auroc_full - mi),
                ),
            ),
            (
                "e2e importance vs random mask",
                Check::new(
                    mi >= mr - 0.01,
                    format!("median {mi:.4} [{}] vs {mr:.4} [{}]", fmt(&self.auroc_importance), fmt(&self.auroc_random)),
                ),
            ),
            ("e2e runtime", Check::new(self.elapsed < budget, format!("{} < {}", secs(self.elapsed), secs(budget)))),
        ]
    }
}
