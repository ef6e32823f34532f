//! Additively homomorphic encryption (Paillier, `g = n + 1`) with a signed
//! fixed-point codec and encrypted affine evaluation.
//!
//! Decryption uses the CRT split over `p^2` and `q^2`. Paillier has no
//! integrity: a unit produced under another modulus decrypts to an unrelated
//! residue, and only ciphertexts sharing a factor with `n` are rejected as a
//! key mismatch.

mod affine;
mod codec;
mod paillier;
mod prime;

pub use affine::{affine_error_bound, encrypted_affine, EncryptedInput};
pub use codec::{FixedPointCodec, DEFAULT_FRACTION_BITS, DEFAULT_RANGE_BITS};
pub use paillier::{keygen, Ciphertext, KeyGenOptions, KeyPair, PrivateKey, PublicKey};
pub use prime::{is_probable_prime, MILLER_RABIN_ROUNDS};

use thiserror::Error;

use crate::binio::Truncated;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("key size {0} bits is not supported (use 1024 or 2048; 512 only in insecure test mode)")]
    UnsupportedKeyBits(usize),
    #[error("{0} requires the insecure-test configuration flag")]
    InsecureTestOnly(&'static str),
    #[error("prime generation failed after {0} attempts")]
    PrimeGeneration(usize),
    #[error("plaintext is not in [0, n)")]
    MessageOutOfRange,
    #[error("scalar is not in [0, n)")]
    ScalarOutOfRange,
    #[error("ciphertext is not in Z_(n^2)")]
    CiphertextOutOfRange,
    #[error("ciphertext was not produced under this key")]
    KeyMismatch,
    #[error("scale mismatch: depth {left} vs depth {right}")]
    ScaleMismatch { left: u8, right: u8 },
    #[error("scale depth {0} exceeds the maximum of 2")]
    ScaleOverflow(u8),
    #[error("value {value} outside the codec dynamic range +/-{limit}")]
    DynamicRange { value: f64, limit: f64 },
    #[error("codec depth must be 1 or 2, got {0}")]
    BadDepth(u8),
    #[error("fraction bits {0} unsupported (1..=48)")]
    BadFractionBits(u32),
    #[error("affine output {row} could reach {bits} bits, exceeding the n/2 headroom of {limit_bits} bits")]
    AffineOverflow { row: usize, bits: u64, limit_bits: u64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed wire encoding: {0}")]
    Wire(String),
    #[error(transparent)]
    Truncated(#[from] Truncated),
}
