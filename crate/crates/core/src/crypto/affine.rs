use num_bigint::BigUint;
use rayon::prelude::*;

use super::codec::signed_to_residue;
use super::{Ciphertext, CryptoError, FixedPointCodec, PublicKey};

/// An encrypted input coordinate. Coordinates without an entry are treated
/// as zero (masked channels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedInput {
    pub index: usize,
    pub ct: Ciphertext,
}

/// Evaluates `y_j = sum_c W[j][c] * x_c + b_j` over encrypted `x`.
///
/// `weights` is row-major with `bias.len()` rows and `cols` columns. Weights
/// are encoded at depth 1, biases at depth 2, and every output ciphertext is
/// at depth 2. Before any exponentiation the worst-case magnitude of each
/// row is checked against `n/2` using the codec's declared input range.
pub fn encrypted_affine(
    pk: &PublicKey,
    inputs: &[EncryptedInput],
    weights: &[f64],
    cols: usize,
    bias: &[f64],
    codec: &FixedPointCodec,
) -> Result<Vec<Ciphertext>, CryptoError> {
    let rows = bias.len();
    if weights.len() != rows * cols {
        return Err(CryptoError::Dimension(format!(
            "weights have {} entries, expected {rows}x{cols}",
            weights.len()
        )));
    }
    for pair in inputs.windows(2) {
        if pair[0].index >= pair[1].index {
            return Err(CryptoError::Dimension("input indices must be strictly ascending".into()));
        }
    }
    if let Some(last) = inputs.last() {
        if last.index >= cols {
            return Err(CryptoError::Dimension(format!(
                "input index {} out of range for {cols} columns",
                last.index
            )));
        }
    }
    for input in inputs {
        if input.ct.scale() != 1 {
            return Err(CryptoError::ScaleMismatch {
                left: input.ct.scale(),
                right: 1,
            });
        }
        if input.ct.value() >= pk.n_squared() {
            return Err(CryptoError::CiphertextOutOfRange);
        }
    }

    let w_int: Vec<i128> = weights
        .iter()
        .map(|&w| codec.encode_signed(w, 1))
        .collect::<Result<_, _>>()?;
    let b_int: Vec<i128> = bias
        .iter()
        .map(|&b| codec.encode_signed(b, 2))
        .collect::<Result<_, _>>()?;

    let x_max = codec.max_abs() * 2f64.powi(codec.fraction_bits() as i32);
    let limit_bits = pk.bits().saturating_sub(2);
    for j in 0..rows {
        let bound: f64 = inputs
            .iter()
            .map(|inp| w_int[j * cols + inp.index].unsigned_abs() as f64 * x_max)
            .sum::<f64>()
            + b_int[j].unsigned_abs() as f64;
        let bits = (bound + 1.0).log2().ceil() as u64;
        if bits >= limit_bits {
            return Err(CryptoError::AffineOverflow {
                row: j,
                bits,
                limit_bits,
            });
        }
    }

    let inverses: Vec<BigUint> = inputs
        .par_iter()
        .map(|inp| pk.inverse(&inp.ct))
        .collect::<Result<_, _>>()?;

    let n2 = pk.n_squared();
    let outputs = (0..rows)
        .into_par_iter()
        .map(|j| {
            // g^b = 1 + b*n
            let mut acc = (BigUint::from(1u32) + signed_to_residue(b_int[j], pk) * pk.n()) % n2;
            for (inp, inv) in inputs.iter().zip(&inverses) {
                let w = w_int[j * cols + inp.index];
                if w == 0 {
                    continue;
                }
                let base = if w < 0 { inv } else { inp.ct.value() };
                let term = base.modpow(&BigUint::from(w.unsigned_abs()), n2);
                acc = (acc * term) % n2;
            }
            Ciphertext::from_parts(acc, 2)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(outputs)
}

/// Worst-case absolute decoding error of one affine output row, given the
/// largest input magnitude `x_max`:
/// `sum_c (|W_c| + x_max) / 2^(phi+1) + (C/4 + 1/2) / 2^(2phi)`.
pub fn affine_error_bound(codec: &FixedPointCodec, row: &[f64], x_max: f64) -> f64 {
    let q = 2f64.powi(-(codec.fraction_bits() as i32));
    let linear: f64 = row.iter().map(|w| w.abs() + x_max).sum::<f64>() * q / 2.0;
    linear + (row.len() as f64 / 4.0 + 0.5) * q * q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, KeyGenOptions, KeyPair};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encrypt_all(kp: &KeyPair, codec: &FixedPointCodec, xs: &[f64]) -> Vec<EncryptedInput> {
        xs.iter()
            .enumerate()
            .map(|(index, &x)| EncryptedInput {
                index,
                ct: kp.public.encrypt(&codec.encode(x, &kp.public).unwrap()).unwrap(),
            })
            .collect()
    }

    fn decrypt_all(kp: &KeyPair, codec: &FixedPointCodec, cts: &[Ciphertext]) -> Vec<f64> {
        cts.iter()
            .map(|c| codec.decode(&kp.private.decrypt(c).unwrap(), c.scale(), &kp.public).unwrap())
            .collect()
    }

    #[test]
    fn identity_map() {
        let kp = keygen(KeyGenOptions::insecure_test(31)).unwrap();
        let codec = FixedPointCodec::default();
        let xs = [0.5, -2.25, 3.125, 0.0];
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let out = encrypted_affine(&kp.public, &encrypt_all(&kp, &codec, &xs), &w, 4, &[0.0; 4], &codec).unwrap();
        assert!(out.iter().all(|c| c.scale() == 2));
        for (y, x) in decrypt_all(&kp, &codec, &out).iter().zip(xs) {
            assert!((y - x).abs() <= 2f64.powi(-24));
        }
    }

    #[test]
    fn constant_map_decodes_bias_exactly() {
        let kp = keygen(KeyGenOptions::insecure_test(32)).unwrap();
        let codec = FixedPointCodec::default();
        let bias = [1.5, -0.75, 1024.0];
        let inputs = encrypt_all(&kp, &codec, &[3.0, -4.0]);
        let out = encrypted_affine(&kp.public, &inputs, &[0.0; 6], 2, &bias, &codec).unwrap();
        assert_eq!(decrypt_all(&kp, &codec, &out), bias.to_vec());
    }

    #[test]
    fn masked_coordinates_contribute_zero() {
        let kp = keygen(KeyGenOptions::insecure_test(33)).unwrap();
        let codec = FixedPointCodec::default();
        let mut inputs = encrypt_all(&kp, &codec, &[1.0, 2.0, 3.0]);
        inputs.remove(1);
        let w = [1.0, 10.0, 100.0];
        let out = encrypted_affine(&kp.public, &inputs, &w, 3, &[0.0], &codec).unwrap();
        let y = decrypt_all(&kp, &codec, &out)[0];
        assert!((y - 301.0).abs() < 1e-5);
    }

    #[test]
    fn random_affine_matches_plaintext() {
        let kp = keygen(KeyGenOptions::insecure_test(34)).unwrap();
        let codec = FixedPointCodec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, cols) = (8, 16);
        let xs: Vec<f64> = (0..cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = encrypted_affine(&kp.public, &encrypt_all(&kp, &codec, &xs), &w, cols, &b, &codec).unwrap();
        for (j, y) in decrypt_all(&kp, &codec, &out).iter().enumerate() {
            let plain: f64 = (0..cols).map(|c| w[j * cols + c] * xs[c]).sum::<f64>() + b[j];
            assert!((y - plain).abs() / plain.abs().max(1.0) <= 1e-3);
            assert!((y - plain).abs() <= affine_error_bound(&codec, &w[j * cols..(j + 1) * cols], 5.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let kp = keygen(KeyGenOptions::insecure_test(35)).unwrap();
        let codec = FixedPointCodec::default();
        let inputs = encrypt_all(&kp, &codec, &[1.0, 2.0]);
        assert!(matches!(
            encrypted_affine(&kp.public, &inputs, &[0.0; 3], 2, &[0.0], &codec),
            Err(CryptoError::Dimension(_))
        ));
        let reversed = vec![inputs[1].clone(), inputs[0].clone()];
        assert!(encrypted_affine(&kp.public, &reversed, &[0.0; 2], 2, &[0.0], &codec).is_err());
        let deep = vec![EncryptedInput {
            index: 0,
            ct: kp.public.mul_encoded(&inputs[0].ct, 1).unwrap(),
        }];
        assert!(matches!(
            encrypted_affine(&kp.public, &deep, &[0.0; 2], 2, &[0.0], &codec),
            Err(CryptoError::ScaleMismatch { .. })
        ));
    }

    #[test]
    fn overflow_detected_analytically() {
        // an 80-bit modulus leaves too little headroom for 2^44-scaled inputs
        let n = (BigUint::from(1u32) << 79u32) + 1u32;
        let pk = PublicKey::from_modulus(n).unwrap();
        let codec = FixedPointCodec::default();
        let inputs: Vec<_> = (0..4)
            .map(|index| EncryptedInput {
                index,
                ct: Ciphertext::from_parts(BigUint::from(2u32), 1).unwrap(),
            })
            .collect();
        assert!(matches!(
            encrypted_affine(&pk, &inputs, &[1024.0; 8], 4, &[0.0, 0.0], &codec),
            Err(CryptoError::AffineOverflow { row: 0, .. })
        ));
    }
}
