use std::sync::OnceLock;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};

use super::CryptoError;

pub const MILLER_RABIN_ROUNDS: usize = 40;
const MAX_CANDIDATES: usize = 100_000;

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        const LIMIT: usize = 20_000;
        let mut composite = vec![false; LIMIT];
        let mut out = Vec::new();
        for i in 2..LIMIT {
            if !composite[i] {
                out.push(i as u32);
                let mut j = i * i;
                while j < LIMIT {
                    composite[j] = true;
                    j += i;
                }
            }
        }
        out
    })
}

/// Uniform integer in `[0, bound)` by rejection over `bits(bound)` random bits.
pub(crate) fn random_below<R: RngCore + ?Sized>(rng: &mut R, bound: &BigUint) -> BigUint {
    assert!(!bound.is_zero());
    let bits = bound.bits() as usize;
    let bytes = bits.div_ceil(8);
    let excess = bytes * 8 - bits;
    let mut buf = vec![0u8; bytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xFFu8 >> excess;
        let v = BigUint::from_bytes_be(&buf);
        if &v < bound {
            return v;
        }
    }
}

/// Miller-Rabin with `rounds` random bases, after trial division.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &p in small_primes() {
        if (n % p).is_zero() {
            return n == &BigUint::from(p);
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let span = n - 3u32;
    'witness: for _ in 0..rounds {
        let a = random_below(rng, &span) + 2u32;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits and the top two bits set, so the
/// product of two such primes has exactly `2*bits` bits.
pub(crate) fn random_prime<R: RngCore + CryptoRng + ?Sized>(
    bits: usize,
    rng: &mut R,
) -> Result<BigUint, CryptoError> {
    let bytes = bits.div_ceil(8);
    let mut buf = vec![0u8; bytes];
    for _ in 0..MAX_CANDIDATES {
        rng.fill_bytes(&mut buf);
        let mut c = BigUint::from_bytes_be(&buf);
        c >>= bytes * 8 - bits;
        c.set_bit(bits as u64 - 1, true);
        c.set_bit(bits as u64 - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, MILLER_RABIN_ROUNDS, rng) {
            return Ok(c);
        }
    }
    Err(CryptoError::PrimeGeneration(MAX_CANDIDATES))
}
