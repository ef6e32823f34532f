use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::prime::{random_below, random_prime};
use super::CryptoError;
use crate::binio::Reader;

/// Paillier public key; the generator is fixed at `g = n + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    half_n: BigUint,
}

#[derive(Clone)]
pub struct PrivateKey {
    public: PublicKey,
    lambda: BigUint,
    mu: BigUint,
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

impl std::fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PrivateKey")
            .field("bits", &self.public.bits())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyGenOptions {
    pub bits: usize,
    /// Permits 512-bit keys and seeded (reproducible) generation.
    pub insecure_test: bool,
    pub seed: Option<u64>,
}

impl Default for KeyGenOptions {
    fn default() -> Self {
        Self {
            bits: 2048,
            insecure_test: false,
            seed: None,
        }
    }
}

impl KeyGenOptions {
    pub fn bits(bits: usize) -> Self {
        Self {
            bits,
            ..Self::default()
        }
    }

    /// Seeded 512-bit keys for fast tests.
    pub fn insecure_test(seed: u64) -> Self {
        Self {
            bits: 512,
            insecure_test: true,
            seed: Some(seed),
        }
    }
}

pub fn keygen(opts: KeyGenOptions) -> Result<KeyPair, CryptoError> {
    match opts.bits {
        1024 | 2048 => {}
        512 if opts.insecure_test => {}
        512 => return Err(CryptoError::InsecureTestOnly("512-bit keys")),
        other => return Err(CryptoError::UnsupportedKeyBits(other)),
    }
    match opts.seed {
        Some(_) if !opts.insecure_test => Err(CryptoError::InsecureTestOnly("seeded key generation")),
        Some(seed) => keygen_with_rng(opts.bits, &mut ChaCha20Rng::seed_from_u64(seed)),
        None => keygen_with_rng(opts.bits, &mut rand::rng()),
    }
}

fn keygen_with_rng<R: RngCore + CryptoRng + ?Sized>(bits: usize, rng: &mut R) -> Result<KeyPair, CryptoError> {
    let half = bits / 2;
    let p = random_prime(half, rng)?;
    let mut q = random_prime(half, rng)?;
    let mut attempts = 0;
    while q == p {
        attempts += 1;
        if attempts > 16 {
            return Err(CryptoError::PrimeGeneration(attempts));
        }
        q = random_prime(half, rng)?;
    }
    let private = PrivateKey::from_primes(p, q)?;
    Ok(KeyPair {
        public: private.public.clone(),
        private,
    })
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self, CryptoError> {
        if n.bits() < 16 || n.is_even() {
            return Err(CryptoError::Wire("modulus must be odd and at least 16 bits".into()));
        }
        Ok(Self {
            n_squared: &n * &n,
            half_n: &n >> 1u32,
            n,
        })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn half_n(&self) -> &BigUint {
        &self.half_n
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// Encrypts `m` at scale depth 1 using the thread-local CSPRNG.
    pub fn encrypt(&self, m: &BigUint) -> Result<Ciphertext, CryptoError> {
        self.encrypt_with_rng(m, &mut rand::rng())
    }

    /// `c = g^m * r^n mod n^2` with fresh `r` coprime to `n`.
    pub fn encrypt_with_rng<R: RngCore + CryptoRng + ?Sized>(
        &self,
        m: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext, CryptoError> {
        if m >= &self.n {
            return Err(CryptoError::MessageOutOfRange);
        }
        let r = loop {
            let r = random_below(rng, &self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                break r;
            }
        };
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext {
            value: (self.g_pow(m) * rn) % &self.n_squared,
            scale: 1,
        })
    }

    /// `(n+1)^m mod n^2 = 1 + m*n`.
    fn g_pow(&self, m: &BigUint) -> BigUint {
        (BigUint::one() + m * &self.n) % &self.n_squared
    }

    fn check(&self, ct: &Ciphertext) -> Result<(), CryptoError> {
        if ct.value >= self.n_squared || ct.value.is_zero() {
            return Err(CryptoError::CiphertextOutOfRange);
        }
        Ok(())
    }

    /// Homomorphic addition: decrypts to `(x + y) mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.check(a)?;
        self.check(b)?;
        if a.scale != b.scale {
            return Err(CryptoError::ScaleMismatch {
                left: a.scale,
                right: b.scale,
            });
        }
        Ok(Ciphertext {
            value: (&a.value * &b.value) % &self.n_squared,
            scale: a.scale,
        })
    }

    /// Adds a plaintext residue without fresh randomness.
    pub fn add_plain(&self, ct: &Ciphertext, k: &BigUint) -> Result<Ciphertext, CryptoError> {
        self.check(ct)?;
        if k >= &self.n {
            return Err(CryptoError::ScalarOutOfRange);
        }
        Ok(Ciphertext {
            value: (&ct.value * self.g_pow(k)) % &self.n_squared,
            scale: ct.scale,
        })
    }

    /// Integer scalar multiplication `ct^k mod n^2`: decrypts to `(x*k) mod n`.
    /// The scale depth is unchanged.
    pub fn mul_plain(&self, ct: &Ciphertext, k: &BigUint) -> Result<Ciphertext, CryptoError> {
        self.check(ct)?;
        if k >= &self.n {
            return Err(CryptoError::ScalarOutOfRange);
        }
        Ok(Ciphertext {
            value: ct.value.modpow(k, &self.n_squared),
            scale: ct.scale,
        })
    }

    /// Multiplication by a fixed-point encoded real given as a signed integer.
    /// Negative scalars go through the ciphertext inverse so the exponent
    /// stays short. The result is one scale depth deeper.
    pub fn mul_encoded(&self, ct: &Ciphertext, k: i128) -> Result<Ciphertext, CryptoError> {
        self.check(ct)?;
        let scale = ct.scale + 1;
        if scale > 2 {
            return Err(CryptoError::ScaleOverflow(scale));
        }
        let base = if k < 0 { self.inverse(ct)? } else { ct.value.clone() };
        Ok(Ciphertext {
            value: base.modpow(&BigUint::from(k.unsigned_abs()), &self.n_squared),
            scale,
        })
    }

    pub(crate) fn inverse(&self, ct: &Ciphertext) -> Result<BigUint, CryptoError> {
        ct.value
            .modinv(&self.n_squared)
            .ok_or(CryptoError::CiphertextOutOfRange)
    }

    /// `u32 length | big-endian n`, little-endian length.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_magnitude(&mut out, &self.n);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let n = read_magnitude(&mut r)?;
        if r.remaining() != 0 {
            return Err(CryptoError::Wire(format!("{} trailing bytes after public key", r.remaining())));
        }
        Self::from_modulus(n)
    }
}

impl PrivateKey {
    fn from_primes(p: BigUint, q: BigUint) -> Result<Self, CryptoError> {
        let n = &p * &q;
        let public = PublicKey::from_modulus(n.clone())?;
        let one = BigUint::one();
        let lambda = (&p - &one).lcm(&(&q - &one));
        if !n.gcd(&lambda).is_one() {
            return Err(CryptoError::PrimeGeneration(0));
        }
        let mu = lambda.modinv(&n).ok_or(CryptoError::PrimeGeneration(0))?;
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let g = &n + &one;
        let hp = l_function(&g.modpow(&(&p - &one), &p_squared), &p)
            .modinv(&p)
            .ok_or(CryptoError::PrimeGeneration(0))?;
        let hq = l_function(&g.modpow(&(&q - &one), &q_squared), &q)
            .modinv(&q)
            .ok_or(CryptoError::PrimeGeneration(0))?;
        let q_inv_p = q.modinv(&p).ok_or(CryptoError::PrimeGeneration(0))?;
        Ok(Self {
            public,
            lambda,
            mu,
            p,
            q,
            p_squared,
            q_squared,
            hp,
            hq,
            q_inv_p,
        })
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    /// CRT decryption. A ciphertext sharing a factor with `n` cannot come
    /// from this key and yields `KeyMismatch`.
    pub fn decrypt(&self, ct: &Ciphertext) -> Result<BigUint, CryptoError> {
        self.public.check(ct)?;
        let one = BigUint::one();
        if (&ct.value % &self.p).is_zero() || (&ct.value % &self.q).is_zero() {
            return Err(CryptoError::KeyMismatch);
        }
        let up = ct.value.modpow(&(&self.p - &one), &self.p_squared);
        let uq = ct.value.modpow(&(&self.q - &one), &self.q_squared);
        let mp = (l_function(&up, &self.p) * &self.hp) % &self.p;
        let mq = (l_function(&uq, &self.q) * &self.hq) % &self.q;
        // m = mq + q * ((mp - mq) * q^-1 mod p)
        let diff = (&mp + &self.p - (&mq % &self.p)) % &self.p;
        let h = (diff * &self.q_inv_p) % &self.p;
        Ok(mq + h * &self.q)
    }
}

fn l_function(u: &BigUint, d: &BigUint) -> BigUint {
    (u - 1u32) / d
}

/// A Paillier ciphertext with its fixed-point scale depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    scale: u8,
}

impl Ciphertext {
    pub fn from_parts(value: BigUint, scale: u8) -> Result<Self, CryptoError> {
        if !(1..=2).contains(&scale) {
            return Err(CryptoError::BadDepth(scale));
        }
        Ok(Self { value, scale })
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn scale(&self) -> u8 {
        self.scale
    }

    pub fn write_wire(&self, out: &mut Vec<u8>) {
        write_magnitude(out, &self.value);
        out.push(self.scale);
    }

    pub fn read_wire(r: &mut Reader<'_>) -> Result<Self, CryptoError> {
        let value = read_magnitude(r)?;
        let scale = r.u8()?;
        Self::from_parts(value, scale)
    }

    pub fn wire_len(&self) -> usize {
        4 + magnitude_len(&self.value) + 1
    }
}

fn magnitude_len(v: &BigUint) -> usize {
    if v.is_zero() {
        0
    } else {
        (v.bits() as usize).div_ceil(8)
    }
}

/// Canonical big-endian magnitude: no leading zero bytes, zero is empty.
fn write_magnitude(out: &mut Vec<u8>, v: &BigUint) {
    if v.is_zero() {
        out.extend_from_slice(&0u32.to_le_bytes());
        return;
    }
    let bytes = v.to_bytes_be();
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bytes);
}

fn read_magnitude(r: &mut Reader<'_>) -> Result<BigUint, CryptoError> {
    let len = r.u32()? as usize;
    let offset = r.offset();
    let bytes = r.take(len)?;
    if bytes.first() == Some(&0) {
        return Err(CryptoError::Wire(format!("leading zero byte at offset {offset}")));
    }
    Ok(BigUint::from_bytes_be(bytes))
}
