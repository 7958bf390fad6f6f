// SPDX-License-Identifier: Apache-2.0

//! Paillier cryptosystem with generator `g = n + 1` and CRT decryption.
//!
//! Keys and ciphertexts are immutable once built and can be shared freely
//! between threads. Every ciphertext carries the fingerprint of the modulus
//! that produced it so that values from different keys are never combined.

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prime::{self, lcm, random_prime};

/// Key sizes accepted by [`KeyPair::generate`].
pub const ALLOWED_KEY_BITS: [u64; 4] = [512, 1024, 2048, 3072];

/// Key size used when none is configured.
pub const DEFAULT_KEY_BITS: u64 = 2048;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unsupported key size: {0} bits")]
    UnsupportedKeySize(u64),
    #[error("plaintext is outside [0, n)")]
    PlaintextOutOfRange,
    #[error("randomness r must satisfy 1 <= r < n and gcd(r, n) = 1")]
    InvalidNonce,
    #[error("ciphertext was produced under a different key")]
    KeyMismatch,
    #[error("ciphertext is not a unit modulo n^2")]
    InvalidCiphertext,
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid prime factors: {0}")]
    InvalidPrimes(&'static str),
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
}

/// First eight bytes of SHA-256 over the fixed-width encoding of `n`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyFingerprint(pub [u8; 8]);

impl fmt::Debug for KeyFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyFingerprint(")?;
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

fn to_fixed_be(value: &BigUint, width: usize) -> Vec<u8> {
    let raw = value.to_bytes_be();
    debug_assert!(raw.len() <= width || value.is_zero());
    let mut out = vec![0u8; width];
    if !value.is_zero() {
        out[width - raw.len()..].copy_from_slice(&raw);
    }
    out
}

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    key_bits: u64,
    fingerprint: KeyFingerprint,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("key_bits", &self.key_bits)
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

impl PublicKey {
    fn from_modulus(n: BigUint) -> Self {
        let key_bits = n.bits();
        let n_squared = &n * &n;
        let digest = Sha256::digest(to_fixed_be(&n, key_bits.div_ceil(8) as usize));
        let mut fp = [0u8; 8];
        fp.copy_from_slice(&digest[..8]);
        Self {
            n,
            n_squared,
            key_bits,
            fingerprint: KeyFingerprint(fp),
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn key_bits(&self) -> u64 {
        self.key_bits
    }

    pub fn fingerprint(&self) -> KeyFingerprint {
        self.fingerprint
    }

    /// Bytes of one serialized ciphertext: `2 * ceil(key_bits / 8)`.
    pub fn ciphertext_width(&self) -> usize {
        2 * self.modulus_width()
    }

    fn modulus_width(&self) -> usize {
        self.key_bits.div_ceil(8) as usize
    }

    /// Encrypts `m` with fresh randomness drawn uniformly from `Z*_n`.
    pub fn encrypt<R: RngCore + CryptoRng + ?Sized>(
        &self,
        m: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext, CryptoError> {
        if *m >= self.n {
            return Err(CryptoError::PlaintextOutOfRange);
        }
        let one = BigUint::one();
        let r = loop {
            let r = rng.gen_biguint_range(&one, &self.n);
            if r.gcd(&self.n).is_one() {
                break r;
            }
        };
        Ok(self.encrypt_unchecked(m, &r))
    }

    /// Encrypts `m` with caller-supplied randomness `r`.
    pub fn encrypt_with_nonce(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext, CryptoError> {
        if *m >= self.n {
            return Err(CryptoError::PlaintextOutOfRange);
        }
        if r.is_zero() || *r >= self.n || !r.gcd(&self.n).is_one() {
            return Err(CryptoError::InvalidNonce);
        }
        Ok(self.encrypt_unchecked(m, r))
    }

    // (1 + m*n) * r^n mod n^2
    fn encrypt_unchecked(&self, m: &BigUint, r: &BigUint) -> Ciphertext {
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ciphertext {
            value: (gm * rn) % &self.n_squared,
            fingerprint: self.fingerprint,
        }
    }

    fn check(&self, c: &Ciphertext) -> Result<(), CryptoError> {
        if c.fingerprint != self.fingerprint {
            return Err(CryptoError::KeyMismatch);
        }
        Ok(())
    }

    /// Homomorphic addition: the result decrypts to `(m_a + m_b) mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: (&a.value * &b.value) % &self.n_squared,
            fingerprint: self.fingerprint,
        })
    }

    /// Element-wise [`PublicKey::add`].
    pub fn add_vectors(&self, a: &[Ciphertext], b: &[Ciphertext]) -> Result<Vec<Ciphertext>, CryptoError> {
        if a.len() != b.len() {
            return Err(CryptoError::LengthMismatch {
                left: a.len(),
                right: b.len(),
            });
        }
        a.iter().zip(b).map(|(x, y)| self.add(x, y)).collect()
    }

    /// 4-byte big-endian `key_bits` followed by `ceil(key_bits / 8)` bytes of `n`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.modulus_width());
        out.extend_from_slice(&(self.key_bits as u32).to_be_bytes());
        out.extend_from_slice(&to_fixed_be(&self.n, self.modulus_width()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 4 {
            return Err(CryptoError::Malformed("public key shorter than header"));
        }
        let key_bits = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as u64;
        let width = key_bits.div_ceil(8) as usize;
        if bytes.len() != 4 + width {
            return Err(CryptoError::Malformed("public key length does not match key_bits"));
        }
        let n = BigUint::from_bytes_be(&bytes[4..]);
        if n.bits() != key_bits || n.is_even() {
            return Err(CryptoError::Malformed("modulus inconsistent with key_bits"));
        }
        Ok(Self::from_modulus(n))
    }

    /// Decodes a fixed-width ciphertext and tags it with this key's fingerprint.
    pub fn ciphertext_from_bytes(&self, bytes: &[u8]) -> Result<Ciphertext, CryptoError> {
        if bytes.len() != self.ciphertext_width() {
            return Err(CryptoError::Malformed("ciphertext width"));
        }
        let value = BigUint::from_bytes_be(bytes);
        if value.is_zero() || value >= self.n_squared {
            return Err(CryptoError::InvalidCiphertext);
        }
        Ok(Ciphertext {
            value,
            fingerprint: self.fingerprint,
        })
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    fingerprint: KeyFingerprint,
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("fingerprint", &self.fingerprint)
            .field("bits", &self.value.bits())
            .finish()
    }
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn fingerprint(&self) -> KeyFingerprint {
        self.fingerprint
    }

    /// Big-endian, left-zero-padded to `width` bytes.
    pub fn to_bytes(&self, width: usize) -> Vec<u8> {
        to_fixed_be(&self.value, width)
    }

    /// Rebuilds a ciphertext tagged with an explicit fingerprint. Used when a
    /// value arrives from a context where the key is known out of band.
    pub fn from_parts(value: BigUint, fingerprint: KeyFingerprint) -> Self {
        Self { value, fingerprint }
    }
}

#[derive(Clone)]
struct CrtCache {
    p_squared: BigUint,
    q_squared: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

#[derive(Clone)]
pub struct PrivateKey {
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
    crt: CrtCache,
    public: PublicKey,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

// L(x) = (x - 1) / d
fn l_function(x: &BigUint, d: &BigUint) -> BigUint {
    (x - 1u32) / d
}

impl PrivateKey {
    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    fn check(&self, c: &Ciphertext) -> Result<(), CryptoError> {
        self.public.check(c)?;
        if c.value.is_zero() || !c.value.gcd(&self.public.n).is_one() {
            return Err(CryptoError::InvalidCiphertext);
        }
        Ok(())
    }

    /// CRT decryption: recovers `m mod p` and `m mod q` and recombines.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, CryptoError> {
        self.check(c)?;
        let crt = &self.crt;
        let p_minus_one = &self.p - 1u32;
        let q_minus_one = &self.q - 1u32;
        let mp = (l_function(&c.value.modpow(&p_minus_one, &crt.p_squared), &self.p) * &crt.hp) % &self.p;
        let mq = (l_function(&c.value.modpow(&q_minus_one, &crt.q_squared), &self.q) * &crt.hq) % &self.q;
        // m = mq + q * ((mp - mq) * q^-1 mod p)
        let diff = (&mp + &self.p - (&mq % &self.p)) % &self.p;
        let h = (diff * &crt.q_inv_p) % &self.p;
        Ok(mq + h * &self.q)
    }

    /// Reference decryption `L(c^lambda mod n^2) * mu mod n`, kept for
    /// differential testing against [`PrivateKey::decrypt`].
    pub fn decrypt_textbook(&self, c: &Ciphertext) -> Result<BigUint, CryptoError> {
        self.check(c)?;
        let n = &self.public.n;
        let u = c.value.modpow(&self.lambda, &self.public.n_squared);
        Ok((l_function(&u, n) * &self.mu) % n)
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    public: PublicKey,
    private: PrivateKey,
}

impl KeyPair {
    /// Generates a key pair with a `key_bits`-bit modulus.
    ///
    /// With `seed` set, generation is fully deterministic; this exists for
    /// reproducible tests and simulations only.
    pub fn generate(key_bits: u64, seed: Option<[u8; 32]>) -> Result<Self, CryptoError> {
        if !ALLOWED_KEY_BITS.contains(&key_bits) {
            return Err(CryptoError::UnsupportedKeySize(key_bits));
        }
        let mut rng = match seed {
            Some(seed) => ChaCha20Rng::from_seed(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        Ok(Self::generate_with_rng(key_bits, &mut rng))
    }

    fn generate_with_rng<R: RngCore + CryptoRng>(key_bits: u64, rng: &mut R) -> Self {
        let half = key_bits / 2;
        loop {
            let p = random_prime(half, rng);
            let q = random_prime(half, rng);
            if let Ok(kp) = Self::from_primes(p, q) {
                if kp.public.key_bits == key_bits {
                    return kp;
                }
            }
        }
    }

    /// Builds a key pair from explicit primes. Test hook: the primes are
    /// checked for primality but the size policy of [`KeyPair::generate`]
    /// does not apply.
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self, CryptoError> {
        if p == q {
            return Err(CryptoError::InvalidPrimes("p and q must differ"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        if !prime::is_probable_prime(&p, 32, &mut rng) || !prime::is_probable_prime(&q, 32, &mut rng) {
            return Err(CryptoError::InvalidPrimes("factor is not prime"));
        }
        if p.bits().abs_diff(q.bits()) > 1 {
            return Err(CryptoError::InvalidPrimes("factor sizes differ by more than one bit"));
        }
        let n = &p * &q;
        let p_minus_one = &p - 1u32;
        let q_minus_one = &q - 1u32;
        if !n.gcd(&(&p_minus_one * &q_minus_one)).is_one() {
            return Err(CryptoError::InvalidPrimes("gcd(pq, (p-1)(q-1)) != 1"));
        }

        let public = PublicKey::from_modulus(n);
        let n = &public.n;
        let g = n + 1u32;
        let lambda = lcm(&p_minus_one, &q_minus_one);
        let mu = l_function(&g.modpow(&lambda, &public.n_squared), n)
            .modinv(n)
            .ok_or(CryptoError::InvalidPrimes("mu is not invertible"))?;

        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let hp = l_function(&g.modpow(&p_minus_one, &p_squared), &p)
            .modinv(&p)
            .ok_or(CryptoError::InvalidPrimes("hp is not invertible"))?;
        let hq = l_function(&g.modpow(&q_minus_one, &q_squared), &q)
            .modinv(&q)
            .ok_or(CryptoError::InvalidPrimes("hq is not invertible"))?;
        let q_inv_p = (&q % &p)
            .modinv(&p)
            .ok_or(CryptoError::InvalidPrimes("q is not invertible mod p"))?;

        let private = PrivateKey {
            p,
            q,
            lambda,
            mu,
            crt: CrtCache {
                p_squared,
                q_squared,
                hp,
                hq,
                q_inv_p,
            },
            public: public.clone(),
        };
        Ok(Self { public, private })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn private_key(&self) -> &PrivateKey {
        &self.private
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> KeyPair {
        KeyPair::from_primes(BigUint::from(11u32), BigUint::from(13u32)).unwrap()
    }

    fn b(x: u64) -> BigUint {
        BigUint::from(x)
    }

    // square-and-multiply over u128, independent of num-bigint's modpow
    fn modpow_u128(mut base: u128, mut exp: u128, modulus: u128) -> u128 {
        let mut acc = 1u128;
        base %= modulus;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = acc * base % modulus;
            }
            base = base * base % modulus;
            exp >>= 1;
        }
        acc
    }

    #[test]
    fn toy_key_parameters() {
        let kp = toy();
        assert_eq!(kp.public_key().n(), &b(143));
        assert_eq!(kp.public_key().n_squared(), &b(143 * 143));
        assert_eq!(kp.private_key().lambda(), &b(60));
        assert_eq!(kp.public_key().key_bits(), 8);
    }

    #[test]
    fn toy_encryption_matches_oracle() {
        let kp = toy();
        let pk = kp.public_key();
        assert_eq!(pk.encrypt_with_nonce(&b(0), &b(1)).unwrap().value(), &b(1));

        let n = 143u128;
        let expected = (1 + 7 * n) * modpow_u128(5, n, n * n) % (n * n);
        let c = pk.encrypt_with_nonce(&b(7), &b(5)).unwrap();
        assert_eq!(c.value(), &BigUint::from(expected));
        assert_eq!(kp.private_key().decrypt(&c).unwrap(), b(7));
        assert_eq!(kp.private_key().decrypt_textbook(&c).unwrap(), b(7));
    }

    #[test]
    fn toy_addition_wraps_modulo_n() {
        let kp = toy();
        let pk = kp.public_key();
        let c40 = pk.encrypt_with_nonce(&b(40), &b(2)).unwrap();
        let c103 = pk.encrypt_with_nonce(&b(103), &b(3)).unwrap();
        let sum = pk.add(&c40, &c103).unwrap();
        assert_eq!(kp.private_key().decrypt(&sum).unwrap(), b(0));

        let c3 = pk.encrypt_with_nonce(&b(3), &b(4)).unwrap();
        let c4 = pk.encrypt_with_nonce(&b(4), &b(9)).unwrap();
        assert_eq!(kp.private_key().decrypt(&pk.add(&c3, &c4).unwrap()).unwrap(), b(7));
    }

    #[test]
    fn crt_matches_textbook_on_every_toy_ciphertext() {
        let kp = toy();
        let sk = kp.private_key();
        let fp = kp.public_key().fingerprint();
        for v in 1u32..(143 * 143) {
            let c = Ciphertext::from_parts(BigUint::from(v), fp);
            match (sk.decrypt(&c), sk.decrypt_textbook(&c)) {
                (Ok(a), Ok(t)) => assert_eq!(a, t, "value {v}"),
                (Err(a), Err(t)) => assert_eq!(a, t),
                other => panic!("disagreement at {v}: {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let kp = toy();
        let pk = kp.public_key();
        assert_eq!(
            pk.encrypt_with_nonce(&b(143), &b(1)).unwrap_err(),
            CryptoError::PlaintextOutOfRange
        );
        assert_eq!(
            pk.encrypt_with_nonce(&b(1), &b(11)).unwrap_err(),
            CryptoError::InvalidNonce
        );
        assert_eq!(
            pk.encrypt_with_nonce(&b(1), &b(0)).unwrap_err(),
            CryptoError::InvalidNonce
        );
        assert_eq!(
            pk.encrypt_with_nonce(&b(1), &b(143)).unwrap_err(),
            CryptoError::InvalidNonce
        );

        let not_unit = Ciphertext::from_parts(b(13), pk.fingerprint());
        assert_eq!(
            kp.private_key().decrypt(&not_unit).unwrap_err(),
            CryptoError::InvalidCiphertext
        );
        assert_eq!(
            KeyPair::generate(768, None).unwrap_err(),
            CryptoError::UnsupportedKeySize(768)
        );
        assert!(KeyPair::from_primes(b(11), b(11)).is_err());
        assert!(KeyPair::from_primes(b(11), b(15)).is_err());
        assert!(KeyPair::from_primes(b(3), b(251)).is_err());
    }

    #[test]
    fn refuses_to_mix_keys() {
        let a = toy();
        let other = KeyPair::from_primes(b(17), b(19)).unwrap();
        let ca = a.public_key().encrypt_with_nonce(&b(1), &b(2)).unwrap();
        let cb = other.public_key().encrypt_with_nonce(&b(1), &b(2)).unwrap();
        assert_eq!(a.public_key().add(&ca, &cb).unwrap_err(), CryptoError::KeyMismatch);
        assert_eq!(other.private_key().decrypt(&ca).unwrap_err(), CryptoError::KeyMismatch);
    }

    #[test]
    fn add_vectors_edge_cases() {
        let kp = toy();
        let pk = kp.public_key();
        assert!(pk.add_vectors(&[], &[]).unwrap().is_empty());
        let enc = |m: u64, r: u64| pk.encrypt_with_nonce(&b(m), &b(r)).unwrap();
        let left = vec![enc(1, 2), enc(2, 3)];
        let right = vec![enc(3, 4), enc(4, 5)];
        let sum = pk.add_vectors(&left, &right).unwrap();
        let plain: Vec<_> = sum.iter().map(|c| kp.private_key().decrypt(c).unwrap()).collect();
        assert_eq!(plain, vec![b(4), b(6)]);
        assert_eq!(sum, pk.add_vectors(&right, &left).unwrap());
        assert_eq!(
            pk.add_vectors(&left, &right[..1]).unwrap_err(),
            CryptoError::LengthMismatch { left: 2, right: 1 }
        );
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let a = KeyPair::generate(512, Some([9u8; 32])).unwrap();
        let b = KeyPair::generate(512, Some([9u8; 32])).unwrap();
        let c = KeyPair::generate(512, Some([10u8; 32])).unwrap();
        assert_eq!(a.public_key().n(), b.public_key().n());
        assert_ne!(a.public_key().n(), c.public_key().n());
        assert_eq!(a.public_key().n().bits(), 512);
        let (p, q) = (a.private_key().p(), a.private_key().q());
        assert_ne!(p, q);
        assert!(p.bits().abs_diff(q.bits()) <= 1);
    }

    #[test]
    fn wire_forms() {
        let kp = KeyPair::generate(512, Some([1u8; 32])).unwrap();
        let pk = kp.public_key();
        let bytes = pk.to_bytes();
        assert_eq!(bytes.len(), 4 + 64);
        assert_eq!(&bytes[..4], &512u32.to_be_bytes());
        assert_eq!(PublicKey::from_bytes(&bytes).unwrap(), *pk);
        assert!(PublicKey::from_bytes(&bytes[..10]).is_err());

        let c = pk.encrypt_with_nonce(&b(1), &b(1)).unwrap();
        let wire = c.to_bytes(pk.ciphertext_width());
        assert_eq!(wire.len(), 128);
        // g^1 * 1^n = 1 + n, which fits in the low half of the field
        assert!(wire[..64].iter().all(|&x| x == 0));
        assert_eq!(BigUint::from_bytes_be(&wire[64..]), pk.n() + 1u32);
        assert_eq!(pk.ciphertext_from_bytes(&wire).unwrap(), c);
        assert!(pk.ciphertext_from_bytes(&wire[1..]).is_err());
        assert!(pk.ciphertext_from_bytes(&vec![0u8; 128]).is_err());
    }
}
