//! Homomorphism, encrypted-affine equivalence and the timing shape of
//! encryption plus decryption.

use std::time::{Duration, Instant};

use anyhow::Result;
use num_bigint::BigUint;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};

use secdood_core::crypto::{keygen, EncryptedInput, FixedPointCodec, KeyGenOptions};
use secdood_core::hypernet::{encrypted_generate, HyperNetConfig, HyperNetParams};
use secdood_core::metrics::bench_crypto;

use crate::{secs, Check};

/// Uniform below `n` up to a 2^-64 bias.
pub fn random_below<R: RngCore>(rng: &mut R, n: &BigUint) -> BigUint {
    let mut bytes = vec![0u8; n.bits().div_ceil(8) as usize + 8];
    rng.fill_bytes(&mut bytes);
    BigUint::from_bytes_be(&bytes) % n
}

/// `D(E(x) E(y)) = x + y` and `D(E(x)^k) = k x (mod n)` on random triples,
/// with the first few triples pinned to the edges of `Z_n`.
pub fn homomorphism(cases: usize, budget: Duration) -> Result<Check> {
    let start = Instant::now();
    let kp = keygen(KeyGenOptions::insecure_test(1))?;
    let (pk, n) = (&kp.public, kp.public.n());
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let top = n - 1u32;
    let edges = [
        (BigUint::ZERO, BigUint::ZERO, BigUint::ZERO),
        (top.clone(), BigUint::from(1u32), top.clone()),
        (top.clone(), top.clone(), BigUint::from(2u32)),
    ];
    let mut failures = 0;
    for i in 0..cases {
        let (x, y, k) = match edges.get(i) {
            Some(e) => e.clone(),
            None => (random_below(&mut rng, n), random_below(&mut rng, n), random_below(&mut rng, n)),
        };
        let ex = pk.encrypt_with_rng(&x, &mut rng)?;
        let ey = pk.encrypt_with_rng(&y, &mut rng)?;
        let sum = kp.private.decrypt(&pk.add(&ex, &ey)?)?;
        let prod = kp.private.decrypt(&pk.mul_plain(&ex, &k)?)?;
        if sum != (&x + &y) % n || prod != (&x * &k) % n {
            failures += 1;
        }
    }
    let took = start.elapsed();
    Ok(Check::new(
        failures == 0 && took < budget,
        format!("{cases} cases at {} bits, {failures} failures, {}", pk.bits(), secs(took)),
    ))
}

fn random_single_layer(features: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<HyperNetParams> {
    let mut p = HyperNetParams::init(HyperNetConfig::single(features, classes), rng)?;
    for layer in &mut p.layers {
        layer.linear.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        layer.linear.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        if let Some(bn) = &mut layer.bn {
            for j in 0..bn.gamma.len() {
                bn.gamma[j] = rng.random_range(0.5..1.5);
                bn.beta[j] = rng.random_range(-0.5..0.5);
                bn.running_mean[j] = rng.random_range(-1.0..1.0);
                bn.running_var[j] = rng.random_range(0.25..4.0);
            }
        }
    }
    Ok(p)
}

/// Decrypted `encrypted_generate` against the plaintext forward pass on
/// random single-layer instances with batch norm.
pub fn encrypted_affine(
    instances: usize,
    features: usize,
    classes: usize,
    key_bits: usize,
    tolerance: f64,
    budget: Duration,
) -> Result<Check> {
    let start = Instant::now();
    let kp = keygen(KeyGenOptions {
        bits: key_bits,
        insecure_test: true,
        seed: Some(4),
    })?;
    let codec = FixedPointCodec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let params = random_single_layer(features, classes, &mut rng)?;
        let profile: Vec<f64> = (0..features).map(|_| rng.random_range(-5.0..5.0)).collect();
        let inputs = profile
            .iter()
            .enumerate()
            .map(|(index, &x)| {
                Ok(EncryptedInput {
                    index,
                    ct: kp.public.encrypt(&codec.encode(x, &kp.public)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = encrypted_generate(&kp.public, &inputs, &params, &codec)?;
        let want = params.forward(&profile)?;
        for (ct, w) in out.iter().zip(&want) {
            let got = codec.decode(&kp.private.decrypt(ct)?, ct.scale(), &kp.public)?;
            worst = worst.max((got - w).abs());
        }
    }
    let took = start.elapsed();
    Ok(Check::new(
        worst <= tolerance && took < budget,
        format!(
            "{instances} instances F={features} K={classes} at {key_bits} bits, max |err| {worst:.3e}, {}",
            secs(took)
        ),
    ))
}

/// Median encrypt+decrypt time must grow strictly with the encrypted
/// fraction, and doubling the fraction from 0.5 to 1.0 must cost >= `min_ratio`.
pub fn timing_shape(key_bits: usize, channels: usize, trials: usize, min_ratio: f64) -> Result<Check> {
    let kp = keygen(KeyGenOptions::bits(key_bits))?;
    let fractions = [0.25, 0.5, 0.75, 1.0];
    let rows = bench_crypto(&kp, &fractions, channels, trials, 6)?;
    let totals: Vec<f64> = rows.iter().map(|r| r.median_ms_total).collect();
    let increasing = totals.windows(2).all(|w| w[1] > w[0]);
    let ratio = totals[3] / totals[1];
    let shape = totals
        .iter()
        .zip(fractions)
        .map(|(t, f)| format!("{f}:{t:.0}ms"))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Check::new(
        increasing && ratio >= min_ratio,
        format!("{key_bits} bits C={channels}: {shape}, ratio(1.0/0.5) {ratio:.3}"),
    ))
}
