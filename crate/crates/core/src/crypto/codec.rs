use num_bigint::{BigInt, BigUint, Sign};
use num_traits::ToPrimitive;

use super::{CryptoError, PublicKey};

pub const DEFAULT_FRACTION_BITS: u32 = 24;
pub const DEFAULT_RANGE_BITS: u32 = 20;

/// Signed fixed-point mapping of reals into `Z_n`.
///
/// `x` encodes to `round(x * 2^(phi*depth))`, negative values wrap to
/// `n - |v|`. Decoding treats residues above `n/2` as negative. Depth 2 is
/// the scale after one multiplication by an encoded real.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointCodec {
    fraction_bits: u32,
    max_abs: f64,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self {
            fraction_bits: DEFAULT_FRACTION_BITS,
            max_abs: (1u64 << DEFAULT_RANGE_BITS) as f64,
        }
    }
}

impl FixedPointCodec {
    pub fn new(fraction_bits: u32, max_abs: f64) -> Result<Self, CryptoError> {
        if !(1..=48).contains(&fraction_bits) {
            return Err(CryptoError::BadFractionBits(fraction_bits));
        }
        if !(max_abs > 0.0 && max_abs <= (1u64 << 24) as f64) {
            return Err(CryptoError::DynamicRange {
                value: max_abs,
                limit: (1u64 << 24) as f64,
            });
        }
        Ok(Self {
            fraction_bits,
            max_abs,
        })
    }

    pub fn fraction_bits(&self) -> u32 {
        self.fraction_bits
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    fn scale(&self, depth: u8) -> Result<f64, CryptoError> {
        if !(1..=2).contains(&depth) {
            return Err(CryptoError::BadDepth(depth));
        }
        Ok(2f64.powi((self.fraction_bits * depth as u32) as i32))
    }

    /// Signed integer image at `depth`; range-checked before any encryption.
    pub fn encode_signed(&self, x: f64, depth: u8) -> Result<i128, CryptoError> {
        let scale = self.scale(depth)?;
        if !x.is_finite() || x.abs() > self.max_abs {
            return Err(CryptoError::DynamicRange {
                value: x,
                limit: self.max_abs,
            });
        }
        Ok((x * scale).round() as i128)
    }

    /// Residue in `Z_n` at depth 1.
    pub fn encode(&self, x: f64, pk: &PublicKey) -> Result<BigUint, CryptoError> {
        self.encode_at(x, 1, pk)
    }

    pub fn encode_at(&self, x: f64, depth: u8, pk: &PublicKey) -> Result<BigUint, CryptoError> {
        Ok(signed_to_residue(self.encode_signed(x, depth)?, pk))
    }

    pub fn decode(&self, m: &BigUint, depth: u8, pk: &PublicKey) -> Result<f64, CryptoError> {
        let scale = self.scale(depth)?;
        if m >= pk.n() {
            return Err(CryptoError::MessageOutOfRange);
        }
        let signed = if m > pk.half_n() {
            BigInt::from_biguint(Sign::Minus, pk.n() - m)
        } else {
            BigInt::from(m.clone())
        };
        Ok(signed.to_f64().unwrap_or(f64::NAN) / scale)
    }
}

pub(crate) fn signed_to_residue(v: i128, pk: &PublicKey) -> BigUint {
    if v >= 0 {
        BigUint::from(v as u128)
    } else {
        pk.n() - BigUint::from(v.unsigned_abs())
    }
}
